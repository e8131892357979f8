#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace qareg;
namespace fs = std::filesystem;

TEST(KMeans, TwoObviousClusters)
{
	const std::vector<double> w { 0, 0, 10, 10 };
	const auto a = kmeans_1d(w, 2);
	EXPECT_EQ(a.centroids, (std::vector<double> { 0, 10 }));
	EXPECT_EQ(clustering_objective(w, a), 0.0);
}

TEST(KMeans, AllEqualWeightsGiveOneCluster)
{
	const std::vector<double> w(7, 0.3);
	for (std::size_t K : { 1u, 2u, 5u })
	{
		const auto a = kmeans_1d(w, K);
		EXPECT_EQ(a.centroids, (std::vector<double> { 0.3 }));
		EXPECT_EQ(clustering_objective(w, a), 0.0);
	}
}

TEST(KMeans, KAtLeastDistinctCountIsLossless)
{
	const std::vector<double> w { 0.5, -0.25, 0.5, 0.125, -0.25 };
	const auto a = kmeans_1d(w, 3);
	EXPECT_EQ(a.centroids, (std::vector<double> { -0.25, 0.125, 0.5 }));
	for (std::size_t i = 0; i < w.size(); i++)
		EXPECT_EQ(a.centroids[a.assignment[i]], w[i]);
}

// 12 weights, K = 3: no better than the exhaustive optimum, no worse than its own start, monotone.
TEST(KMeans, ExhaustiveOracleOnTwelveWeights)
{
	Rng rng(2024);
	for (int trial = 0; trial < 20; trial++)
	{
		std::vector<double> w(12);
		for (double &x : w)
			x = rng.normal();
		KMeansTrace trace;
		const auto a = kmeans_1d(w, 3, 100, 0, &trace);
		const double obj = clustering_objective(w, a);
		const double best = oracle::exhaustive_kmeans_optimum(w, 3);
		EXPECT_GE(obj, best * (1 - 1e-9));
		EXPECT_LE(obj, trace.initial_objective + 1e-12);
		for (std::size_t i = 1; i < trace.objective.size(); i++)
			EXPECT_LE(trace.objective[i], trace.objective[i - 1] + 1e-12);
		EXPECT_TRUE(trace.converged);
	}
}

TEST(KMeans, EmptyClustersAreDropped)
{
	// the middle initial centroid (5) is farther from every weight than the outer ones
	const std::vector<double> w { 0, 0.1, 0.2, 9.8, 9.9, 10 };
	const auto a = kmeans_1d(w, 3);
	EXPECT_EQ(a.centroids.size(), 2u);
	EXPECT_EQ(a.sizes, (std::vector<std::size_t> { 3, 3 }));
}

TEST(KMeans, Errors)
{
	EXPECT_THROW(kmeans_1d(std::vector<double> { }, 2), InputError);
	EXPECT_THROW(kmeans_1d(std::vector<double> { 1.0 }, 0), ConfigError);
}

TEST(AssignToCodebook, SpecCases)
{
	const auto a = assign_to_codebook(std::vector<double> { -0.9, 0.1, 0.8 }, std::vector<double> { -1, 0, 1 });
	EXPECT_EQ(a.assignment, (std::vector<std::uint32_t> { 0, 1, 2 }));
	EXPECT_EQ(a.centroids, (std::vector<double> { -1, 0, 1 }));

	const auto tie = assign_to_codebook(std::vector<double> { 0.5 }, std::vector<double> { 0, 1 });
	EXPECT_EQ(tie.assignment[0], 0u);

	const auto single = assign_to_codebook(std::vector<double> { -3, 0, 7 }, std::vector<double> { 2 });
	EXPECT_EQ(single.assignment, (std::vector<std::uint32_t> { 0, 0, 0 }));
	EXPECT_THROW(assign_to_codebook(std::vector<double> { 1 }, std::vector<double> { }), ConfigError);
}

TEST(AssignToCodebook, MatchesBruteForce)
{
	Rng rng(8);
	for (int trial = 0; trial < 50; trial++)
	{
		std::vector<double> w(30), cb(1 + rng.below(6));
		for (double &x : w)
			x = std::round(rng.uniform(-2, 2) * 8) / 8;  // coarse grid provokes ties
		for (double &c : cb)
			c = std::round(rng.uniform(-2, 2) * 4) / 4;
		const auto a = assign_to_codebook(w, cb);
		for (std::size_t i = 0; i < w.size(); i++)
			EXPECT_EQ(a.centroids[a.assignment[i]], cb[oracle::nearest(w[i], cb)]);
	}
}

TEST(RecomputeCentroids, SpecCases)
{
	const std::vector<double> w { -0.9, 0.1, 0.8 };
	const auto a = recompute_centroids(w, assign_to_codebook(w, std::vector<double> { -1, 0, 1 }));
	EXPECT_EQ(a.centroids, w);
	EXPECT_EQ(a.assignment, (std::vector<std::uint32_t> { 0, 1, 2 }));

	ClusterAssignment pair;
	pair.assignment = { 0, 0 };
	pair.centroids = { 0.0 };
	EXPECT_NEAR(recompute_centroids(std::vector<double> { 0.2, 0.4 }, pair).centroids[0], 0.3, 1e-15);
}

TEST(RecomputeCentroids, NeverIncreasesObjective)
{
	Rng rng(31);
	for (int trial = 0; trial < 100; trial++)
	{
		std::vector<double> w(40), cb(4);
		for (double &x : w)
			x = rng.normal();
		for (double &c : cb)
			c = rng.uniform(-2, 2);
		const auto a = assign_to_codebook(w, cb);
		const auto b = recompute_centroids(w, a);
		EXPECT_LE(clustering_objective(w, b), clustering_objective(w, a) + 1e-12);
		EXPECT_EQ(a.assignment, b.assignment);
	}
}

namespace
{
	Model small_model(std::uint64_t seed)
	{
		Model m = build_model( { 2, 4, 4 }, "conv:3,pool,dense:6,dense:3");
		Rng rng(seed);
		initialize(m, rng);
		return m;
	}

	void expect_quantized_invariants(const QuantizedModel &qm, int K)
	{
		for (const auto &a : qm.assignments)
		{
			const auto &w = qm.base.layers[a.layer_index].weights.data;
			EXPECT_LE(distinct_count(w), static_cast<std::size_t>(K));
			for (std::size_t i = 0; i < w.size(); i++)
				ASSERT_EQ(w[i], a.centroids[a.assignment[i]]);
		}
		for (const auto &s : codebook_stats(qm))
			EXPECT_LE(s.entropy_bits, std::log2(static_cast<double>(K)) + 1e-12);
	}
}

TEST(QuantizeModel, EveryPathKeepsInvariants)
{
	const Model m = small_model(4);
	for (LayerGroup g : { LayerGroup::ConvOnly, LayerGroup::DenseOnly, LayerGroup::All })
		for (RegKind kind : { RegKind::None, RegKind::Sine, RegKind::Cosine, RegKind::MinL2, RegKind::Exp })
		{
			RegConfig c;
			c.kind = kind;
			c.K = 4;
			c.layer_group = g;
			QuantizedModel qm;
			if (kind == RegKind::None)
				qm = quantize_model(m, c, std::nullopt);
			else
			{
				auto codes = init_codebooks(m, c);
				qm = quantize_model(m, c, std::span<const Codebook>(codes));
			}
			expect_quantized_invariants(qm, 4);
			for (auto i : qm.untouched_layers)
				EXPECT_EQ(qm.base.layers[i].weights, m.layers[i].weights);
			EXPECT_EQ(qm.assignments.size(), selected_layers(m, g).size());
		}
}

TEST(QuantizeModel, WeightsOnCodebookAreUnchanged)
{
	Model m = small_model(5);
	RegConfig c;
	c.kind = RegKind::MinL2;
	c.K = 4;
	auto codes = init_codebooks(m, c);
	for (std::size_t j = 0; j < codes.size(); j++)
	{
		auto &w = m.layers[selected_layers(m, c.layer_group)[j]].weights.data;
		for (std::size_t i = 0; i < w.size(); i++)
			w[i] = codes[j].u[i % 4];
	}
	EXPECT_EQ(reg_value(m, c, codes), 0.0);
	const auto qm = quantize_model(m, c, std::span<const Codebook>(codes));
	for (std::size_t i = 0; i < m.layers.size(); i++)
		EXPECT_EQ(qm.base.layers[i].weights, m.layers[i].weights);
	EXPECT_EQ(reg_value(qm.base, c, codes), 0.0);
}

TEST(QuantizeModel, Idempotent)
{
	const Model m = small_model(6);
	RegConfig c;
	c.K = 3;
	const auto once = quantize_model(m, c, std::nullopt);
	const auto twice = quantize_model(once.base, c, std::nullopt);
	for (std::size_t i = 0; i < m.layers.size(); i++)
		EXPECT_EQ(once.base.layers[i].weights, twice.base.layers[i].weights);
	for (const auto &a : once.assignments)
	{
		const auto &w = once.base.layers[a.layer_index].weights.data;
		const auto again = recompute_centroids(w, assign_to_codebook(w, a.centroids));
		EXPECT_EQ(again.centroids, a.centroids);
	}
}

TEST(QuantizeModel, NoneKindWithCodebooksIsMisuse)
{
	const Model m = small_model(7);
	RegConfig c;
	std::vector<Codebook> codes { Codebook( { 0.0, 1.0 }) };
	EXPECT_THROW(quantize_model(m, c, std::span<const Codebook>(codes)), MisuseError);
}

TEST(CodebookStats, EntropyExamples)
{
	EXPECT_EQ(entropy_bits(std::vector<std::size_t> { 10 }), 0.0);
	EXPECT_DOUBLE_EQ(entropy_bits(std::vector<std::size_t>(8, 5)), 3.0);
	EXPECT_DOUBLE_EQ(entropy_bits(std::vector<std::size_t> { 2, 1, 1 }), 1.5);

	QuantizedModel qm;
	qm.base = small_model(1);
	ClusterAssignment a;
	a.layer_index = 0;
	a.centroids = { -0.1, 0.2, 0.3 };
	a.assignment = { 0, 0, 1, 2, 0, 0, 1, 2 };
	detail::count_sizes(a);
	qm.assignments.push_back(a);
	const auto s = codebook_stats(qm);
	ASSERT_EQ(s.size(), 1u);
	EXPECT_EQ(s[0].distinct_values, 3u);
	EXPECT_DOUBLE_EQ(s[0].entropy_bits, 1.5);
	EXPECT_EQ(s[0].index_bits, 2.0);
}

TEST(QuantizedDump, RoundTripIsBitExact)
{
	const Model m = small_model(9);
	RegConfig c;
	c.K = 5;
	const auto qm = quantize_model(m, c, std::nullopt);
	const fs::path dir = fs::temp_directory_path() / "qareg_test_dump";
	fs::remove_all(dir);
	write_quantized_dump(qm, dir);
	ASSERT_TRUE(fs::exists(dir / "centroids.csv"));
	const auto back = read_quantized_dump(m, dir);
	ASSERT_EQ(back.assignments.size(), qm.assignments.size());
	for (std::size_t k = 0; k < qm.assignments.size(); k++)
	{
		EXPECT_EQ(back.assignments[k].assignment, qm.assignments[k].assignment);
		EXPECT_EQ(back.assignments[k].centroids, qm.assignments[k].centroids);
	}
	for (std::size_t i = 0; i < m.layers.size(); i++)
		EXPECT_EQ(back.base.layers[i].weights, qm.base.layers[i].weights);
	EXPECT_EQ(back.untouched_layers, qm.untouched_layers);

	// corrupt the binary half
	{
		std::ofstream out(dir / "assignments.bin", std::ios::binary | std::ios::trunc);
		out << "QAREGASN";
	}
	EXPECT_THROW(read_quantized_dump(m, dir), FormatError);
}
