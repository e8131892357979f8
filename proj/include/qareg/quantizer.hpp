/*
 * quantizer.hpp
 *
 * Weight sharing: every selected layer is clustered (1-D k-means for the
 * unregularized baseline, nearest-representative assignment for regularized
 * models), each weight is replaced by its cluster centroid, and the cluster
 * statistics are reported.
 */

#ifndef QAREG_QUANTIZER_HPP_
#define QAREG_QUANTIZER_HPP_

#include <qareg/nn.hpp>
#include <qareg/regularizers.hpp>
#include <qareg/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace qareg
{

	struct ClusterAssignment
	{
			std::size_t layer_index = 0;
			std::vector<std::uint32_t> assignment;  // one per weight, row-major
			std::vector<double> centroids;
			std::vector<std::size_t> sizes;

			friend bool operator==(const ClusterAssignment&, const ClusterAssignment&) = default;
	};

	struct QuantizedModel
	{
			Model base;
			std::vector<ClusterAssignment> assignments;
			std::vector<std::size_t> untouched_layers;
	};

	/// Objective values recorded by kmeans_1d after every assignment and every update step.
	struct KMeansTrace
	{
			std::vector<double> objective;
			double initial_objective = 0.0;
			std::size_t iterations = 0;
			bool converged = false;
	};

	inline double clustering_objective(std::span<const double> weights, const ClusterAssignment &a)
	{
		double s = 0.0;
		for (std::size_t i = 0; i < weights.size(); i++)
		{
			const double d = weights[i] - a.centroids[a.assignment[i]];
			s += d * d;
		}
		return s;
	}

	namespace detail
	{
		/// Nearest centroid by |w - c|, lowest index on ties.
		inline std::uint32_t nearest_centroid(double w, std::span<const double> centroids)
		{
			std::uint32_t best = 0;
			double best_d = std::abs(w - centroids[0]);
			for (std::size_t j = 1; j < centroids.size(); j++)
			{
				const double d = std::abs(w - centroids[j]);
				if (d < best_d)
				{
					best_d = d;
					best = static_cast<std::uint32_t>(j);
				}
			}
			return best;
		}

		inline void count_sizes(ClusterAssignment &a)
		{
			a.sizes.assign(a.centroids.size(), 0);
			for (auto j : a.assignment)
				a.sizes[j]++;
		}

		/// Removes empty clusters and renumbers the assignment.
		inline void drop_empty_clusters(ClusterAssignment &a)
		{
			count_sizes(a);
			std::vector<std::uint32_t> remap(a.centroids.size());
			std::vector<double> centroids;
			std::vector<std::size_t> sizes;
			for (std::size_t j = 0; j < a.centroids.size(); j++)
				if (a.sizes[j] > 0)
				{
					remap[j] = static_cast<std::uint32_t>(centroids.size());
					centroids.push_back(a.centroids[j]);
					sizes.push_back(a.sizes[j]);
				}
			if (centroids.size() == a.centroids.size())
				return;
			for (auto &j : a.assignment)
				j = remap[j];
			a.centroids = std::move(centroids);
			a.sizes = std::move(sizes);
		}

		inline void check_weights(std::span<const double> weights)
		{
			if (weights.empty())
				throw InputError("cannot cluster an empty weight array");
			for (double w : weights)
				if (!std::isfinite(w))
					throw InputError("cannot cluster non-finite weights");
		}
	}

	/// Assigns each weight to its nearest codebook entry; centroids start as the codebook, empty clusters dropped.
	inline ClusterAssignment assign_to_codebook(std::span<const double> weights, std::span<const double> codebook)
	{
		if (codebook.empty())
			throw ConfigError("codebook is empty");
		ClusterAssignment a;
		a.centroids.assign(codebook.begin(), codebook.end());
		a.assignment.resize(weights.size());
		for (std::size_t i = 0; i < weights.size(); i++)
			a.assignment[i] = detail::nearest_centroid(weights[i], codebook);
		detail::drop_empty_clusters(a);
		return a;
	}

	/*
	 * centroid_j = mean of the weights assigned to j. The mean is taken around
	 * the first member, so a cluster of identical values reproduces that value
	 * exactly.
	 */
	inline ClusterAssignment recompute_centroids(std::span<const double> weights, ClusterAssignment a)
	{
		if (a.assignment.size() != weights.size())
			throw InputError("assignment has " + std::to_string(a.assignment.size()) + " entries for " + std::to_string(weights.size()) + " weights");
		const std::size_t K = a.centroids.size();
		std::vector<double> pivot(K, 0.0), sum(K, 0.0);
		std::vector<std::size_t> count(K, 0);
		for (std::size_t i = 0; i < weights.size(); i++)
		{
			const auto j = a.assignment[i];
			if (j >= K)
				throw InputError("cluster index " + std::to_string(j) + " out of range");
			if (count[j]++ == 0)
				pivot[j] = weights[i];
			sum[j] += weights[i] - pivot[j];
		}
		for (std::size_t j = 0; j < K; j++)
			if (count[j] > 0)
				a.centroids[j] = pivot[j] + sum[j] / static_cast<double>(count[j]);
		detail::drop_empty_clusters(a);
		return a;
	}

	/*
	 * Lloyd's algorithm in one dimension with K evenly spaced initial
	 * centroids over [min, max]. Stops when the assignment no longer changes
	 * or after max_iters updates. If K is at least the number of distinct
	 * values, returns one cluster per distinct value. The initialization is
	 * deterministic, so `seed` does not influence the result.
	 */
	inline ClusterAssignment kmeans_1d(std::span<const double> weights, std::size_t K, std::size_t max_iters = 100, std::uint64_t seed = 0,
			KMeansTrace *trace = nullptr)
	{
		(void) seed;
		detail::check_weights(weights);
		if (K == 0)
			throw ConfigError("k-means needs K >= 1");

		std::vector<double> distinct(weights.begin(), weights.end());
		std::sort(distinct.begin(), distinct.end());
		distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
		if (K >= distinct.size())
		{
			ClusterAssignment a;
			a.centroids = distinct;
			a.assignment.resize(weights.size());
			for (std::size_t i = 0; i < weights.size(); i++)
				a.assignment[i] = static_cast<std::uint32_t>(std::lower_bound(distinct.begin(), distinct.end(), weights[i]) - distinct.begin());
			detail::count_sizes(a);
			if (trace)
			{
				*trace = KMeansTrace { };
				trace->objective.push_back(0.0);
				trace->converged = true;
			}
			return a;
		}

		const double lo = distinct.front(), hi = distinct.back();
		ClusterAssignment a;
		a.centroids.resize(K);
		for (std::size_t k = 0; k < K; k++)
			a.centroids[k] = (K == 1) ? 0.5 * (lo + hi) : lo + static_cast<double>(k) * (hi - lo) / static_cast<double>(K - 1);
		if (K > 1)
			a.centroids.back() = hi;

		if (trace)
			*trace = KMeansTrace { };
		std::vector<std::uint32_t> previous;
		for (std::size_t iter = 0;; iter++)
		{
			a.assignment.resize(weights.size());
			for (std::size_t i = 0; i < weights.size(); i++)
				a.assignment[i] = detail::nearest_centroid(weights[i], a.centroids);
			if (trace)
			{
				const double obj = clustering_objective(weights, a);
				if (iter == 0)
					trace->initial_objective = obj;
				trace->objective.push_back(obj);
			}
			if (iter > 0 && a.assignment == previous)
			{
				if (trace)
					trace->converged = true;
				break;
			}
			if (iter == max_iters)
				break;
			a = recompute_centroids(weights, std::move(a));
			if (trace)
			{
				trace->objective.push_back(clustering_objective(weights, a));
				trace->iterations = iter + 1;
			}
			previous = a.assignment;
		}
		a = recompute_centroids(weights, std::move(a));
		return a;
	}

	inline void write_shared_weights(LayerParams &layer, const ClusterAssignment &a)
	{
		if (a.assignment.size() != layer.weights.size())
			throw InputError("assignment does not cover layer " + std::to_string(a.layer_index));
		for (std::size_t i = 0; i < a.assignment.size(); i++)
			layer.weights[i] = a.centroids[a.assignment[i]];
	}

	/*
	 * Quantizes the layers selected by config.layer_group. Without codebooks
	 * every layer is clustered with kmeans_1d (K = config.K); with codebooks
	 * the weights go to the nearest representative (static minima for
	 * Sine/Cosine, the learned u for MinL2/Exp) and centroids are recomputed.
	 */
	inline QuantizedModel quantize_model(const Model &model, const RegConfig &config, std::optional<std::span<const Codebook>> codebooks,
			std::size_t max_iters = 100)
	{
		const auto layers = require_selected_layers(model, config.layer_group);
		if (codebooks && config.kind == RegKind::None)
			throw MisuseError("codebook quantization needs a regularizer kind; use the k-means path for unregularized models");
		if (codebooks && is_dynamic(config.kind))
			detail::check_codebooks(model, config, codebooks->size());

		QuantizedModel qm;
		qm.base = model;
		for (std::size_t i = 0; i < model.layers.size(); i++)
			if (model.layers[i].parameterized() && std::find(layers.begin(), layers.end(), i) == layers.end())
				qm.untouched_layers.push_back(i);

		std::vector<double> static_codes;
		if (codebooks && is_static(config.kind))
			static_codes = static_minima(config.kind, config.K, config.w_min, config.w_max);

		for (std::size_t j = 0; j < layers.size(); j++)
		{
			LayerParams &layer = qm.base.layers[layers[j]];
			const std::span<const double> w = layer.weights.values();
			ClusterAssignment a;
			if (!codebooks)
				a = kmeans_1d(w, static_cast<std::size_t>(config.K), max_iters);
			else
			{
				const std::span<const double> codes =
						is_static(config.kind) ? std::span<const double>(static_codes) : std::span<const double>((*codebooks)[detail::codebook_slot(config, j)].u);
				a = recompute_centroids(w, assign_to_codebook(w, codes));
			}
			a.layer_index = layers[j];
			write_shared_weights(layer, a);
			qm.assignments.push_back(std::move(a));
		}
		return qm;
	}

	struct LayerCodebookStats
	{
			std::size_t layer_index = 0;
			std::size_t distinct_values = 0;
			double entropy_bits = 0.0;
			double index_bits = 0.0;
	};

	/// Shannon entropy (bits) of a population histogram.
	inline double entropy_bits(std::span<const std::size_t> counts)
	{
		std::size_t total = 0;
		for (auto c : counts)
			total += c;
		if (total == 0)
			return 0.0;
		double h = 0.0;
		for (auto c : counts)
			if (c > 0)
			{
				const double p = static_cast<double>(c) / static_cast<double>(total);
				h -= p * std::log2(p);
			}
		return std::max(0.0, h);
	}

	/// Per quantized layer: distinct shared values, entropy of their occupancy and fixed-width index size.
	inline std::vector<LayerCodebookStats> codebook_stats(const QuantizedModel &qm)
	{
		std::vector<LayerCodebookStats> out;
		for (const auto &a : qm.assignments)
		{
			std::map<double, std::size_t> occupancy;
			for (std::size_t j = 0; j < a.centroids.size(); j++)
			{
				const std::size_t size = j < a.sizes.size() ? a.sizes[j] : 0;
				if (size > 0)
					occupancy[a.centroids[j]] += size;
			}
			std::vector<std::size_t> counts;
			for (const auto &[value, n] : occupancy)
				counts.push_back(n);
			LayerCodebookStats s;
			s.layer_index = a.layer_index;
			s.distinct_values = counts.size();
			s.entropy_bits = std::min(entropy_bits(counts), counts.size() > 1 ? std::log2(static_cast<double>(counts.size())) : 0.0);
			s.index_bits = counts.size() > 1 ? std::ceil(std::log2(static_cast<double>(counts.size()))) : 0.0;
			out.push_back(s);
		}
		return out;
	}

	inline std::size_t distinct_count(std::span<const double> values)
	{
		std::vector<double> v(values.begin(), values.end());
		std::sort(v.begin(), v.end());
		return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
	}

	/// Shortest decimal that parses back to the same double.
	inline std::string format_real(double v)
	{
		char buf[32];
		std::snprintf(buf, sizeof(buf), "%.17g", v);
		return buf;
	}

	/*
	 * Quantized dump, one directory:
	 *   centroids.csv   - header "layer,cluster,centroid,size"; centroids in
	 *                     %.17g decimal, which round-trips doubles exactly
	 *   assignments.bin - "QAREGASN", u32 version (1), u32 layer count, then
	 *                     per layer: u32 layer index, u64 entry count, entry
	 *                     count x u32 cluster index. All little-endian.
	 */
	namespace detail
	{
		inline void put_u32(std::ostream &out, std::uint32_t v)
		{
			char b[4];
			for (int i = 0; i < 4; i++)
				b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
			out.write(b, 4);
		}
		inline void put_u64(std::ostream &out, std::uint64_t v)
		{
			char b[8];
			for (int i = 0; i < 8; i++)
				b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
			out.write(b, 8);
		}
		inline std::uint64_t get_le(std::istream &in, int bytes, const std::string &what)
		{
			unsigned char b[8];
			const std::streamoff at = in.tellg();
			if (!in.read(reinterpret_cast<char*>(b), bytes))
				throw FormatError(what + ": unexpected end of data at byte offset " + std::to_string(at));
			std::uint64_t v = 0;
			for (int i = bytes - 1; i >= 0; i--)
				v = (v << 8) | b[i];
			return v;
		}
	}

	inline void write_quantized_dump(const QuantizedModel &qm, const std::filesystem::path &dir)
	{
		std::filesystem::create_directories(dir);
		std::ofstream csv(dir / "centroids.csv", std::ios::binary);
		std::ofstream bin(dir / "assignments.bin", std::ios::binary);
		if (!csv || !bin)
			throw IoError("cannot write quantized dump into '" + dir.string() + "'");
		csv << "layer,cluster,centroid,size\n";
		bin.write("QAREGASN", 8);
		detail::put_u32(bin, 1);
		detail::put_u32(bin, static_cast<std::uint32_t>(qm.assignments.size()));
		for (const auto &a : qm.assignments)
		{
			for (std::size_t j = 0; j < a.centroids.size(); j++)
				csv << a.layer_index << ',' << j << ',' << format_real(a.centroids[j]) << ',' << (j < a.sizes.size() ? a.sizes[j] : 0) << '\n';
			detail::put_u32(bin, static_cast<std::uint32_t>(a.layer_index));
			detail::put_u64(bin, a.assignment.size());
			for (auto j : a.assignment)
				detail::put_u32(bin, j);
		}
		if (!csv || !bin)
			throw IoError("short write to quantized dump in '" + dir.string() + "'");
	}

	/// Rebuilds a QuantizedModel on top of `base` (untouched layers and biases come from it).
	inline QuantizedModel read_quantized_dump(const Model &base, const std::filesystem::path &dir)
	{
		const auto bin_path = dir / "assignments.bin", csv_path = dir / "centroids.csv";
		std::ifstream bin(bin_path, std::ios::binary);
		std::ifstream csv(csv_path, std::ios::binary);
		if (!bin)
			throw IoError("cannot open '" + bin_path.string() + "'");
		if (!csv)
			throw IoError("cannot open '" + csv_path.string() + "'");

		char magic[8];
		if (!bin.read(magic, 8) || std::string(magic, 8) != "QAREGASN")
			throw FormatError(bin_path.string() + ": bad magic at byte offset 0");
		if (detail::get_le(bin, 4, bin_path.string()) != 1)
			throw FormatError(bin_path.string() + ": unsupported version at byte offset 8");
		const std::size_t n_layers = detail::get_le(bin, 4, bin_path.string());

		std::map<std::size_t, std::vector<std::pair<double, std::size_t>>> clusters;
		std::string line;
		std::getline(csv, line);
		if (line != "layer,cluster,centroid,size")
			throw FormatError(csv_path.string() + ": unexpected header '" + line + "'");
		std::size_t line_no = 1;
		while (std::getline(csv, line))
		{
			line_no++;
			if (line.empty())
				continue;
			std::istringstream ss(line);
			std::string f[4];
			for (auto &s : f)
				if (!std::getline(ss, s, ','))
					throw FormatError(csv_path.string() + ": malformed line " + std::to_string(line_no));
			const std::size_t layer = std::stoul(f[0]), cluster = std::stoul(f[1]);
			auto &v = clusters[layer];
			if (cluster != v.size())
				throw FormatError(csv_path.string() + ": clusters out of order on line " + std::to_string(line_no));
			v.emplace_back(std::strtod(f[2].c_str(), nullptr), std::stoul(f[3]));
		}

		QuantizedModel qm;
		qm.base = base;
		std::vector<bool> quantized(base.layers.size(), false);
		for (std::size_t k = 0; k < n_layers; k++)
		{
			ClusterAssignment a;
			a.layer_index = detail::get_le(bin, 4, bin_path.string());
			const std::size_t count = detail::get_le(bin, 8, bin_path.string());
			if (a.layer_index >= base.layers.size() || base.layers[a.layer_index].weights.size() != count)
				throw FormatError(bin_path.string() + ": layer " + std::to_string(a.layer_index) + " does not match the model");
			a.assignment.resize(count);
			for (auto &j : a.assignment)
				j = static_cast<std::uint32_t>(detail::get_le(bin, 4, bin_path.string()));
			const auto it = clusters.find(a.layer_index);
			if (it == clusters.end())
				throw FormatError(csv_path.string() + ": no centroids for layer " + std::to_string(a.layer_index));
			for (const auto &[c, n] : it->second)
			{
				a.centroids.push_back(c);
				a.sizes.push_back(n);
			}
			for (auto j : a.assignment)
				if (j >= a.centroids.size())
					throw FormatError(bin_path.string() + ": cluster index " + std::to_string(j) + " out of range for layer " + std::to_string(a.layer_index));
			write_shared_weights(qm.base.layers[a.layer_index], a);
			quantized[a.layer_index] = true;
			qm.assignments.push_back(std::move(a));
		}
		for (std::size_t i = 0; i < base.layers.size(); i++)
			if (base.layers[i].parameterized() && !quantized[i])
				qm.untouched_layers.push_back(i);
		return qm;
	}

} /* namespace qareg */

#endif /* QAREG_QUANTIZER_HPP_ */
