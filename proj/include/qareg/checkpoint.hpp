/*
 * checkpoint.hpp
 *
 * Binary checkpoint of model + codebooks + optimizer state. All integers are
 * little-endian, doubles are stored as their IEEE-754 bit pattern (u64), so
 * a reloaded run resumes bit-exactly.
 *
 *   "QAREGCKP" u32 version(1)
 *   u64 seed, u64 epochs_done
 *   RegConfig:  u32 kind, i32 K, f64 w_min, f64 w_max, f64 lambda,
 *               u32 layer_group, u32 codebook_mode
 *   Model:      shape input_shape, u32 layer count, per layer:
 *               u32 kind, shape in, shape out, u64 kernel, u64 fan_in,
 *               u64 fan_out, vec weights, u8 has_bias [, vec bias]
 *   Codebooks:  u32 count, per codebook vec u
 *   Optimizer:  f64 lr, f64 momentum, u64 decay_every, f64 decay_factor,
 *               4 x (u32 count, count x vec) for weight/bias/codebook/
 *               centroid velocities
 *
 * shape = u32 rank + rank x u64; vec = u64 length + length x f64.
 */

#ifndef QAREG_CHECKPOINT_HPP_
#define QAREG_CHECKPOINT_HPP_

#include <qareg/nn.hpp>
#include <qareg/regularizers.hpp>
#include <qareg/tensor.hpp>
#include <qareg/training.hpp>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace qareg
{

	struct Checkpoint
	{
			Model model;
			RegConfig config;
			std::vector<Codebook> codebooks;
			OptimizerState optimizer;
			std::uint64_t seed = 0;
			std::uint64_t epochs_done = 0;
	};

	namespace detail
	{
		class Writer
		{
				std::ofstream m_out;
				std::string m_path;
			public:
				explicit Writer(const std::filesystem::path &path) :
						m_out(path, std::ios::binary),
						m_path(path.string())
				{
					if (!m_out)
						throw IoError("cannot write '" + m_path + "'");
				}
				void bytes(const void *p, std::size_t n)
				{
					m_out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
				}
				void u(std::uint64_t v, int width)
				{
					unsigned char b[8];
					for (int i = 0; i < width; i++)
						b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
					bytes(b, static_cast<std::size_t>(width));
				}
				void u8(std::uint8_t v)
				{
					u(v, 1);
				}
				void u32(std::uint32_t v)
				{
					u(v, 4);
				}
				void u64(std::uint64_t v)
				{
					u(v, 8);
				}
				void f64(double v)
				{
					u64(std::bit_cast<std::uint64_t>(v));
				}
				void shape(const Shape &s)
				{
					u32(static_cast<std::uint32_t>(s.size()));
					for (auto d : s)
						u64(d);
				}
				void vec(std::span<const double> v)
				{
					u64(v.size());
					for (double x : v)
						f64(x);
				}
				void finish()
				{
					m_out.flush();
					if (!m_out)
						throw IoError("short write to '" + m_path + "'");
				}
		};

		class Reader
		{
				std::vector<std::uint8_t> m_data;
				std::size_t m_pos = 0;
				std::string m_path;
			public:
				explicit Reader(const std::filesystem::path &path) :
						m_data(read_file_bytes(path)),
						m_path(path.string())
				{
				}
				std::uint64_t u(int width)
				{
					if (m_pos + static_cast<std::size_t>(width) > m_data.size())
						throw FormatError(m_path + ": unexpected end of data at byte offset " + std::to_string(m_pos));
					std::uint64_t v = 0;
					for (int i = width - 1; i >= 0; i--)
						v = (v << 8) | m_data[m_pos + static_cast<std::size_t>(i)];
					m_pos += static_cast<std::size_t>(width);
					return v;
				}
				std::uint8_t u8()
				{
					return static_cast<std::uint8_t>(u(1));
				}
				std::uint32_t u32()
				{
					return static_cast<std::uint32_t>(u(4));
				}
				std::uint64_t u64()
				{
					return u(8);
				}
				double f64()
				{
					return std::bit_cast<double>(u64());
				}
				std::string fixed(std::size_t n)
				{
					if (m_pos + n > m_data.size())
						throw FormatError(m_path + ": unexpected end of data at byte offset " + std::to_string(m_pos));
					std::string s(m_data.begin() + static_cast<std::ptrdiff_t>(m_pos), m_data.begin() + static_cast<std::ptrdiff_t>(m_pos + n));
					m_pos += n;
					return s;
				}
				Shape shape()
				{
					const std::size_t at = m_pos;
					const std::uint32_t rank = u32();
					if (rank > 8)
						throw FormatError(m_path + ": implausible tensor rank at byte offset " + std::to_string(at));
					Shape s(rank);
					for (auto &d : s)
						d = u64();
					return s;
				}
				std::vector<double> vec()
				{
					const std::size_t at = m_pos;
					const std::uint64_t n = u64();
					if (n > (m_data.size() - m_pos) / 8)
						throw FormatError(m_path + ": vector length " + std::to_string(n) + " overruns the file at byte offset " + std::to_string(at));
					std::vector<double> v(n);
					for (auto &x : v)
						x = f64();
					return v;
				}
				std::size_t position() const noexcept
				{
					return m_pos;
				}
				const std::string& path() const noexcept
				{
					return m_path;
				}
				bool at_end() const noexcept
				{
					return m_pos == m_data.size();
				}
		};

		inline void write_velocities(Writer &w, const std::vector<std::vector<double>> &v)
		{
			w.u32(static_cast<std::uint32_t>(v.size()));
			for (const auto &x : v)
				w.vec(x);
		}
		inline std::vector<std::vector<double>> read_velocities(Reader &r)
		{
			std::vector<std::vector<double>> v(r.u32());
			for (auto &x : v)
				x = r.vec();
			return v;
		}
	}

	inline void save_checkpoint(const Checkpoint &ck, const std::filesystem::path &path)
	{
		detail::Writer w(path);
		w.bytes("QAREGCKP", 8);
		w.u32(1);
		w.u64(ck.seed);
		w.u64(ck.epochs_done);

		const RegConfig &c = ck.config;
		w.u32(static_cast<std::uint32_t>(c.kind));
		w.u32(static_cast<std::uint32_t>(c.K));
		w.f64(c.w_min);
		w.f64(c.w_max);
		w.f64(c.lambda);
		w.u32(static_cast<std::uint32_t>(c.layer_group));
		w.u32(static_cast<std::uint32_t>(c.codebook_mode));

		w.shape(ck.model.input_shape);
		w.u32(static_cast<std::uint32_t>(ck.model.layers.size()));
		for (const auto &l : ck.model.layers)
		{
			w.u32(static_cast<std::uint32_t>(l.kind));
			w.shape(l.in_shape);
			w.shape(l.out_shape);
			w.u64(l.kernel);
			w.u64(l.fan_in);
			w.u64(l.fan_out);
			w.shape(l.weights.shape);
			w.vec(l.weights.data);
			w.u8(l.bias ? 1 : 0);
			if (l.bias)
				w.vec(l.bias->data);
		}

		w.u32(static_cast<std::uint32_t>(ck.codebooks.size()));
		for (const auto &cb : ck.codebooks)
			w.vec(cb.u);

		const OptimizerState &o = ck.optimizer;
		w.f64(o.learning_rate);
		w.f64(o.momentum);
		w.u64(o.decay_every);
		w.f64(o.decay_factor);
		detail::write_velocities(w, o.weight_velocity);
		detail::write_velocities(w, o.bias_velocity);
		detail::write_velocities(w, o.codebook_velocity);
		detail::write_velocities(w, o.centroid_velocity);
		w.finish();
	}

	inline Checkpoint load_checkpoint(const std::filesystem::path &path)
	{
		detail::Reader r(path);
		if (r.fixed(8) != "QAREGCKP")
			throw FormatError(path.string() + ": not a checkpoint (bad magic at byte offset 0)");
		if (r.u32() != 1)
			throw FormatError(path.string() + ": unsupported checkpoint version at byte offset 8");
		Checkpoint ck;
		ck.seed = r.u64();
		ck.epochs_done = r.u64();

		auto enum_field = [&r](std::uint32_t limit, const char *what) {
			const std::size_t at = r.position();
			const std::uint32_t v = r.u32();
			if (v > limit)
				throw FormatError(r.path() + ": invalid " + what + " " + std::to_string(v) + " at byte offset " + std::to_string(at));
			return v;
		};
		ck.config.kind = static_cast<RegKind>(enum_field(4, "regularizer kind"));
		ck.config.K = static_cast<int>(r.u32());
		ck.config.w_min = r.f64();
		ck.config.w_max = r.f64();
		ck.config.lambda = r.f64();
		ck.config.layer_group = static_cast<LayerGroup>(enum_field(2, "layer group"));
		ck.config.codebook_mode = static_cast<CodebookMode>(enum_field(1, "codebook mode"));

		ck.model.input_shape = r.shape();
		const std::uint32_t n_layers = r.u32();
		for (std::uint32_t i = 0; i < n_layers; i++)
		{
			LayerParams l;
			l.kind = static_cast<LayerKind>(enum_field(4, "layer kind"));
			l.in_shape = r.shape();
			l.out_shape = r.shape();
			l.kernel = r.u64();
			l.fan_in = r.u64();
			l.fan_out = r.u64();
			const std::size_t at = r.position();
			Shape ws = r.shape();
			std::vector<double> wv = r.vec();
			if (!ws.empty() || !wv.empty())
			{
				l.weights = Tensor(ws, std::move(wv));
				l.grad_weights = Tensor(ws);
			}
			// conv kernels hold out_channels x (in_channels * k * k) entries, i.e. fan_out x fan_in
			if (l.parameterized() && l.weights.size() != l.fan_in * l.fan_out)
				throw FormatError(path.string() + ": layer " + std::to_string(i) + " weights inconsistent with fan-in/fan-out at byte offset " + std::to_string(at));
			if (r.u8())
			{
				std::vector<double> b = r.vec();
				const std::size_t n = b.size();
				l.bias = Tensor( { n }, std::move(b));
				l.grad_bias = Tensor( { n });
			}
			ck.model.layers.push_back(std::move(l));
		}

		ck.codebooks.resize(r.u32());
		for (auto &cb : ck.codebooks)
			cb = Codebook(r.vec());

		OptimizerState &o = ck.optimizer;
		o.learning_rate = r.f64();
		o.momentum = r.f64();
		o.decay_every = r.u64();
		o.decay_factor = r.f64();
		o.weight_velocity = detail::read_velocities(r);
		o.bias_velocity = detail::read_velocities(r);
		o.codebook_velocity = detail::read_velocities(r);
		o.centroid_velocity = detail::read_velocities(r);
		if (!r.at_end())
			throw FormatError(path.string() + ": trailing bytes after byte offset " + std::to_string(r.position()));
		return ck;
	}

} /* namespace qareg */

#endif /* QAREG_CHECKPOINT_HPP_ */
