/*
 * cifar.hpp
 *
 * CIFAR-10 binary batches: each record is 3073 bytes, one label byte (0-9)
 * followed by 3072 pixel bytes (1024 R, 1024 G, 1024 B; each plane
 * row-major 32x32). Training files are data_batch_{1..5}.bin, the test file
 * is test_batch.bin, 10000 records each.
 */

#ifndef QAREG_CIFAR_HPP_
#define QAREG_CIFAR_HPP_

#include <qareg/tensor.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

namespace qareg
{

	namespace cifar
	{
		inline constexpr std::size_t channels = 3;
		inline constexpr std::size_t side = 32;
		inline constexpr std::size_t pixels_per_image = channels * side * side;
		inline constexpr std::size_t record_size = 1 + pixels_per_image;
		inline constexpr std::size_t records_per_file = 10000;
		inline constexpr std::size_t num_classes = 10;
		inline constexpr std::array<const char*, 10> class_names = { "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship",
				"truck" };
	}

	/// Undecoded records: labels[i] and pixels[i*3072 .. (i+1)*3072).
	struct RawRecords
	{
			std::vector<std::uint8_t> labels;
			std::vector<std::uint8_t> pixels;

			std::size_t size() const noexcept
			{
				return labels.size();
			}
	};

	struct Dataset
	{
			Tensor images;  // [N, C, H, W]
			Tensor labels;  // [N], integral class indices

			std::size_t size() const noexcept
			{
				return labels.size();
			}
	};

	struct ChannelMeans
	{
			std::vector<double> mean;
	};

	inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path &path)
	{
		std::ifstream in(path, std::ios::binary);
		if (!in)
			throw IoError("cannot open '" + path.string() + "'");
		return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
	}

	/// Splits a CIFAR-10 batch buffer into labels and planar pixels.
	inline RawRecords parse_cifar_records(std::span<const std::uint8_t> bytes, const std::string &source = "<buffer>")
	{
		const std::size_t whole = bytes.size() / cifar::record_size;
		if (bytes.size() % cifar::record_size != 0)
			throw FormatError(source + ": truncated record at byte offset " + std::to_string(whole * cifar::record_size) + " ("
					+ std::to_string(bytes.size() % cifar::record_size) + " of " + std::to_string(cifar::record_size) + " bytes present)");
		RawRecords out;
		out.labels.resize(whole);
		out.pixels.resize(whole * cifar::pixels_per_image);
		for (std::size_t r = 0; r < whole; r++)
		{
			const std::size_t offset = r * cifar::record_size;
			if (bytes[offset] >= cifar::num_classes)
				throw FormatError(source + ": label byte " + std::to_string(bytes[offset]) + " out of range at byte offset " + std::to_string(offset));
			out.labels[r] = bytes[offset];
			std::copy_n(bytes.begin() + offset + 1, cifar::pixels_per_image, out.pixels.begin() + r * cifar::pixels_per_image);
		}
		return out;
	}

	inline std::vector<std::uint8_t> serialize_cifar_records(const RawRecords &records)
	{
		std::vector<std::uint8_t> out;
		out.reserve(records.size() * cifar::record_size);
		for (std::size_t r = 0; r < records.size(); r++)
		{
			out.push_back(records.labels[r]);
			out.insert(out.end(), records.pixels.begin() + r * cifar::pixels_per_image, records.pixels.begin() + (r + 1) * cifar::pixels_per_image);
		}
		return out;
	}

	inline void write_cifar_file(const std::filesystem::path &path, const RawRecords &records)
	{
		std::ofstream out(path, std::ios::binary);
		if (!out)
			throw IoError("cannot write '" + path.string() + "'");
		const auto bytes = serialize_cifar_records(records);
		out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
		if (!out)
			throw IoError("short write to '" + path.string() + "'");
	}

	/*
	 * Rescales bytes to [0,1] and subtracts the per-channel mean. When `means`
	 * is null the mean is computed from this set (training split) and
	 * returned; otherwise the given means are reused (test split).
	 */
	inline Dataset preprocess(std::span<const std::uint8_t> raw_images, std::span<const std::uint8_t> raw_labels, ChannelMeans &means, bool compute_means,
			const Shape &image_shape = { cifar::channels, cifar::side, cifar::side })
	{
		const std::size_t per_image = shape_volume(image_shape);
		const std::size_t C = image_shape.at(0), plane = per_image / C;
		const std::size_t N = raw_labels.size();
		if (raw_images.size() != N * per_image)
		{
			const std::size_t offset = std::min(raw_images.size(), N * per_image);
			throw FormatError("pixel data ends at byte offset " + std::to_string(raw_images.size()) + ", expected " + std::to_string(N * per_image)
					+ " bytes for " + std::to_string(N) + " images (first inconsistent offset " + std::to_string(offset) + ")");
		}
		if (N == 0)
			throw InputError("no images to preprocess");

		if (compute_means)
		{
			means.mean.assign(C, 0.0);
			for (std::size_t n = 0; n < N; n++)
				for (std::size_t c = 0; c < C; c++)
				{
					const std::uint8_t *p = raw_images.data() + n * per_image + c * plane;
					std::uint64_t s = 0;
					for (std::size_t i = 0; i < plane; i++)
						s += p[i];
					means.mean[c] += static_cast<double>(s);
				}
			for (double &m : means.mean)
				m /= 255.0 * static_cast<double>(N * plane);
		}
		else if (means.mean.size() != C)
			throw InputError("channel means have " + std::to_string(means.mean.size()) + " entries, images have " + std::to_string(C) + " channels");

		Shape s { N };
		s.insert(s.end(), image_shape.begin(), image_shape.end());
		Dataset d { Tensor(std::move(s)), Tensor( { N }) };
		for (std::size_t n = 0; n < N; n++)
		{
			d.labels[n] = static_cast<double>(raw_labels[n]);
			for (std::size_t c = 0; c < C; c++)
			{
				const std::size_t base = n * per_image + c * plane;
				for (std::size_t i = 0; i < plane; i++)
					d.images[base + i] = static_cast<double>(raw_images[base + i]) / 255.0 - means.mean[c];
			}
		}
		return d;
	}

	inline RawRecords take_records(const RawRecords &src, std::size_t count)
	{
		count = std::min(count, src.size());
		RawRecords out;
		out.labels.assign(src.labels.begin(), src.labels.begin() + count);
		out.pixels.assign(src.pixels.begin(), src.pixels.begin() + count * cifar::pixels_per_image);
		return out;
	}

	struct CifarSplits
	{
			Dataset train;
			Dataset test;
			ChannelMeans means;
	};

	/// Loads the first `train_count` training and `test_count` test records from a CIFAR-10 binary directory.
	inline CifarSplits load_cifar10(const std::filesystem::path &dir, std::size_t train_count, std::size_t test_count)
	{
		if (!std::filesystem::is_directory(dir))
			throw IoError("dataset directory '" + dir.string() + "' does not exist");
		RawRecords train;
		for (int b = 1; b <= 5 && train.size() < train_count; b++)
		{
			const auto path = dir / ("data_batch_" + std::to_string(b) + ".bin");
			if (!std::filesystem::exists(path))
				throw IoError("missing training batch '" + path.string() + "'");
			const auto part = parse_cifar_records(read_file_bytes(path), path.string());
			train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
			train.pixels.insert(train.pixels.end(), part.pixels.begin(), part.pixels.end());
		}
		if (train.size() < train_count)
			throw ConfigError("requested " + std::to_string(train_count) + " training records, only " + std::to_string(train.size()) + " available");
		train = take_records(train, train_count);

		const auto test_path = dir / "test_batch.bin";
		if (!std::filesystem::exists(test_path))
			throw IoError("missing test batch '" + test_path.string() + "'");
		RawRecords test = parse_cifar_records(read_file_bytes(test_path), test_path.string());
		if (test.size() < test_count)
			throw ConfigError("requested " + std::to_string(test_count) + " test records, only " + std::to_string(test.size()) + " available");
		test = take_records(test, test_count);

		CifarSplits out;
		out.train = preprocess(train.pixels, train.labels, out.means, true);
		out.test = preprocess(test.pixels, test.labels, out.means, false);
		return out;
	}

	/*
	 * Procedural 10-class image set in CIFAR-10 layout. Each class owns a
	 * random low-frequency colour texture plus a coloured blob; samples are
	 * translated, contrast-jittered, mixed with a distractor class and noised.
	 * Used where the real archive is unavailable.
	 */
	inline RawRecords make_synthetic_cifar(std::size_t count, std::uint64_t seed)
	{
		constexpr std::size_t S = cifar::side, C = cifar::channels, P = S * S;
		Rng proto_rng(0x5eedc1fa);  // class prototypes are fixed across seeds
		std::vector<std::vector<double>> protos(cifar::num_classes, std::vector<double>(cifar::pixels_per_image));
		for (auto &proto : protos)
		{
			struct Wave
			{
					double fx, fy, phase, amp[C];
			};
			std::vector<Wave> waves(3);
			for (auto &w : waves)
			{
				w.fx = proto_rng.uniform(-3.0, 3.0);
				w.fy = proto_rng.uniform(-3.0, 3.0);
				w.phase = proto_rng.uniform(0.0, 2.0 * M_PI);
				for (double &a : w.amp)
					a = proto_rng.uniform(-0.5, 0.5);
			}
			const double bx = proto_rng.uniform(6.0, 26.0), by = proto_rng.uniform(6.0, 26.0), br = proto_rng.uniform(3.0, 7.0);
			double bcol[C];
			for (double &b : bcol)
				b = proto_rng.uniform(-0.8, 0.8);
			for (std::size_t c = 0; c < C; c++)
				for (std::size_t y = 0; y < S; y++)
					for (std::size_t x = 0; x < S; x++)
					{
						double v = 0.0;
						for (const auto &w : waves)
							v += w.amp[c] * std::sin(2.0 * M_PI * (w.fx * x + w.fy * y) / S + w.phase);
						const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
						v += bcol[c] * std::exp(-d2 / (2.0 * br * br));
						proto[c * P + y * S + x] = v;
					}
		}

		Rng rng(mix_seed(seed, 0xc1fa));
		RawRecords out;
		out.labels.resize(count);
		out.pixels.resize(count * cifar::pixels_per_image);
		for (std::size_t n = 0; n < count; n++)
		{
			const std::size_t label = rng.below(cifar::num_classes);
			std::size_t other = rng.below(cifar::num_classes - 1);
			if (other >= label)
				other++;
			const long dx = static_cast<long>(rng.below(9)) - 4, dy = static_cast<long>(rng.below(9)) - 4;
			const double contrast = rng.uniform(0.5, 1.5), mix = rng.uniform(0.0, 1.0);
			double shift[C];
			for (double &s : shift)
				s = 0.2 * rng.normal();
			out.labels[n] = static_cast<std::uint8_t>(label);
			for (std::size_t c = 0; c < C; c++)
				for (std::size_t y = 0; y < S; y++)
					for (std::size_t x = 0; x < S; x++)
					{
						const std::size_t sy = static_cast<std::size_t>((static_cast<long>(y) + dy + static_cast<long>(S)) % static_cast<long>(S));
						const std::size_t sx = static_cast<std::size_t>((static_cast<long>(x) + dx + static_cast<long>(S)) % static_cast<long>(S));
						const std::size_t src = c * P + sy * S + sx;
						const double v = contrast * (protos[label][src] + mix * protos[other][src]) + shift[c] + 1.6 * rng.normal();
						const double byte = std::round(128.0 + 80.0 * v);
						out.pixels[n * cifar::pixels_per_image + c * P + y * S + x] = static_cast<std::uint8_t>(std::clamp(byte, 0.0, 255.0));
					}
		}
		return out;
	}

	/// Writes a synthetic CIFAR-10 directory (train records spread over data_batch_{1..5}.bin).
	inline void write_synthetic_cifar_dir(const std::filesystem::path &dir, std::size_t train_count, std::size_t test_count, std::uint64_t seed)
	{
		if (train_count > 5 * cifar::records_per_file || test_count > cifar::records_per_file)
			throw ConfigError("synthetic set larger than the CIFAR-10 file layout allows");
		std::filesystem::create_directories(dir);
		const RawRecords train = make_synthetic_cifar(train_count, seed);
		for (int b = 1; b <= 5; b++)
		{
			const std::size_t lo = std::min(train_count, (b - 1) * cifar::records_per_file);
			const std::size_t hi = std::min(train_count, b * cifar::records_per_file);
			RawRecords part;
			part.labels.assign(train.labels.begin() + lo, train.labels.begin() + hi);
			part.pixels.assign(train.pixels.begin() + lo * cifar::pixels_per_image, train.pixels.begin() + hi * cifar::pixels_per_image);
			write_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), part);
		}
		write_cifar_file(dir / "test_batch.bin", make_synthetic_cifar(test_count, mix_seed(seed, 1)));
	}

} /* namespace qareg */

#endif /* QAREG_CIFAR_HPP_ */
