// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any fails.
//
// Criteria 7 and 8 run the desk protocol on CIFAR-10 from $QAREG_CIFAR_DIR, or
// on a generated synthetic set in CIFAR-10 format when the variable is unset.

#include "../oracles.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace qareg;
namespace fs = std::filesystem;

namespace
{
	struct Outcome
	{
			bool pass = true;
			std::string detail;

			void fail(const std::string &why)
			{
				if (pass)
					detail = why;
				pass = false;
			}
	};

	std::string slurp(const fs::path &p)
	{
		std::ifstream in(p, std::ios::binary);
		std::stringstream ss;
		ss << in.rdbuf();
		return ss.str();
	}

	std::string fmt(double v, int digits = 4)
	{
		char buf[64];
		std::snprintf(buf, sizeof buf, "%.*g", digits, v);
		return buf;
	}

	constexpr RegKind all_kinds[] = { RegKind::Sine, RegKind::Cosine, RegKind::MinL2, RegKind::Exp };

	// Non-differentiable points of rho for the given codebook.
	std::vector<double> loci(const RegConfig &c, std::span<const double> u)
	{
		std::vector<double> out;
		const double span = c.w_max - c.w_min;
		switch (c.kind)
		{
			case RegKind::Sine:
				for (int k = -2 * c.K; k <= 3 * c.K; k++)
					out.push_back(c.w_min + k * span / (c.K - 1));
				break;
			case RegKind::Cosine:
				for (int k = -2 * c.K; k <= 3 * c.K; k++)
					out.push_back(c.w_min + span * (2 * k + 1) / (2.0 * c.K));
				break;
			case RegKind::MinL2:
			case RegKind::Exp:
			{
				std::vector<double> s(u.begin(), u.end());
				std::sort(s.begin(), s.end());
				for (std::size_t i = 0; i + 1 < s.size(); i++)
					out.push_back(0.5 * (s[i] + s[i + 1]));
				if (c.kind == RegKind::Exp)
					out.insert(out.end(), s.begin(), s.end());
				break;
			}
			case RegKind::None:
				break;
		}
		return out;
	}

	double distance_to(const std::vector<double> &points, double x)
	{
		double d = std::numeric_limits<double>::infinity();
		for (double p : points)
			d = std::min(d, std::abs(x - p));
		return d;
	}

	// Moves every selected weight at least `gap` away from the loci of its codebook.
	void clear_loci(Model &m, const RegConfig &c, const std::vector<Codebook> &cbs, double gap, Rng &rng)
	{
		const auto layers = selected_layers(m, c.layer_group);
		for (std::size_t j = 0; j < layers.size(); j++)
		{
			const auto pts = loci(c, cbs.empty() ? std::span<const double>() : std::span<const double>(cbs[c.codebook_mode == CodebookMode::Shared ? 0 : j].u));
			for (double &w : m.layers[layers[j]].weights.data)
				while (distance_to(pts, w) < gap)
					w = rng.uniform(c.w_min * 0.6, c.w_max * 0.6);
		}
	}

	// 1. Analytic gradients of task loss + lambda R against central differences.
	Outcome gradient_suite()
	{
		Outcome o;
		const auto t0 = std::chrono::steady_clock::now();
		Rng rng(101);
		const Shape in { 2, 6, 6 };
		Tensor x( { 3, 2, 6, 6 });
		for (double &v : x.data)
			v = rng.normal();
		const std::vector<double> y { 0, 2, 1 };
		std::size_t total = 0;
		for (RegKind kind : all_kinds)
		{
			RegConfig c;
			c.kind = kind;
			c.K = 4;
			c.lambda = 0.7;
			c.w_min = -0.6;
			c.w_max = 0.6;
			std::size_t conv_pts = 0, dense_pts = 0, u_pts = 0;
			for (int trial = 0; trial < 400 && (conv_pts < 100 || dense_pts < 100 || (is_dynamic(kind) && u_pts < 100)); trial++)
			{
				Model m = build_model(in, "conv:2,pool,dense:5,dense:3");
				Rng init(rng.below(1u << 30));
				initialize(m, init);
				std::vector<Codebook> cbs = init_codebooks(m, c);
				for (auto &cb : cbs)
					for (double &u : cb.u)
						u += rng.uniform(-0.05, 0.05);
				clear_loci(m, c, cbs, 2e-3, rng);

				const auto objective = [&] {
					return loss_only(m, x, y) + c.lambda * reg_value(m, c, cbs);
				};
				loss_and_grad(m, x, y);
				for (auto &cb : cbs)
					cb.zero_grad();
				reg_value_and_grads(m, c, cbs);
				const Model analytic = m;
				const std::vector<Codebook> analytic_u = cbs;

				// A single draw per layer kind; entries near ReLU or pooling kinks disagree across step sizes and are skipped.
				for (auto li : selected_layers(m, LayerGroup::All))
				{
					auto &w = m.layers[li].weights.data;
					const std::size_t i = rng.below(w.size());
					const double fd = oracle::central_difference(objective, &w[i], 1e-6);
					const double fd2 = oracle::central_difference(objective, &w[i], 5e-7);
					if (oracle::relative_error(fd, fd2) > 1e-5)
						continue;
					const double err = oracle::relative_error(analytic.layers[li].grad_weights[i], fd);
					if (err > 1e-4)
						o.fail(to_string(kind) + " " + to_string(m.layers[li].kind) + " weight rel err " + fmt(err));
					(m.layers[li].kind == LayerKind::Conv2D ? conv_pts : dense_pts)++;
				}
				if (is_dynamic(kind))
					for (std::size_t j = 0; j < cbs.size(); j++)
					{
						const std::size_t k = rng.below(cbs[j].u.size());
						const double fd = oracle::central_difference(objective, &cbs[j].u[k], 1e-6);
						const double err = oracle::relative_error(analytic_u[j].grad_u[k], fd);
						if (err > 1e-4)
							o.fail(to_string(kind) + " u rel err " + fmt(err));
						u_pts++;
					}
			}
			if (conv_pts < 100 || dense_pts < 100 || (is_dynamic(kind) && u_pts < 100))
				o.fail(to_string(kind) + ": too few usable points");
			total += conv_pts + dense_pts + u_pts;
		}
		const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
		if (secs >= 60.0)
			o.fail("runtime " + fmt(secs) + " s");
		if (o.pass)
			o.detail = std::to_string(total) + " points over conv, dense and u in " + fmt(secs, 3) + " s";
		return o;
	}

	// 2. Static minima are zeros, and zero counts on a 1e-4 grid are right.
	Outcome minima_suite()
	{
		Outcome o;
		struct Range
		{
				double w, W;
		};
		std::size_t cases = 0;
		for (int K : { 2, 3, 4, 8, 16 })
			for (Range r : { Range { -1, 1 }, Range { -0.5, 0.3 }, Range { 0, 2 } })
				for (RegKind kind : { RegKind::Sine, RegKind::Cosine })
				{
					cases++;
					const auto rho = [&](double v) {
						return kind == RegKind::Sine ? rho_sine(v, K, r.w, r.W) : rho_cosine(v, K, r.w, r.W);
					};
					const auto mins = static_minima(kind, K, r.w, r.W);
					const std::string tag = to_string(kind) + " K=" + std::to_string(K) + " [" + fmt(r.w) + "," + fmt(r.W) + "]";
					for (double m : mins)
						if (rho(m) > 1e-12)
							o.fail(tag + ": rho at minimum " + fmt(rho(m)));
					const std::size_t n = static_cast<std::size_t>(std::llround((r.W - r.w) / 1e-4));
					std::vector<double> g(n + 1);
					for (std::size_t i = 0; i <= n; i++)
						g[i] = rho(r.w + (r.W - r.w) * static_cast<double>(i) / static_cast<double>(n));
					// a zero is a grid local minimum below the largest value |rho| can reach one step from a root
					const double slope = M_PI * K / (r.W - r.w), bound = slope * 1e-4;
					std::size_t zeros = 0;
					bool at_lo = false, at_hi = false;
					for (std::size_t i = 0; i <= n; i++)
					{
						const bool left = i == 0 || g[i] <= g[i - 1], right = i == n || g[i] < g[i + 1];
						if (left && right && g[i] <= bound)
						{
							zeros++;
							at_lo |= i == 0;
							at_hi |= i == n;
						}
					}
					if (zeros != static_cast<std::size_t>(K))
						o.fail(tag + ": " + std::to_string(zeros) + " zeros");
					if (kind == RegKind::Sine && !(at_lo && at_hi && rho(r.w) <= 1e-12 && rho(r.W) <= 1e-12))
						o.fail(tag + ": endpoints are not zeros");
					if (kind == RegKind::Cosine && (at_lo || at_hi))
						o.fail(tag + ": zero at an endpoint");
				}
		if (o.pass)
			o.detail = std::to_string(cases) + " (kind, K, range) cases";
		return o;
	}

	// 3. Range bounds over 1e5 random inputs.
	Outcome bound_suite()
	{
		Outcome o;
		Rng rng(303);
		for (int t = 0; t < 100000; t++)
		{
			const int K = 2 + static_cast<int>(rng.below(31));
			const double w = rng.uniform(-3, 1), W = w + rng.uniform(1e-3, 4);
			const double v = rng.uniform(-6, 6);
			std::vector<double> u(1 + rng.below(16));
			for (double &x : u)
				x = rng.uniform(-3, 3);
			const double s = rho_sine(v, K, w, W), c = rho_cosine(v, K, w, W);
			const double m = rho_minl2(v, u).value, e = rho_exp(v, u).value;
			if (!(s >= 0 && s <= 1) || !(c >= 0 && c <= 1) || !(e >= 0 && e < 1) || !(m >= 0))
			{
				o.fail("violation at wbar=" + fmt(v, 17) + " K=" + std::to_string(K));
				break;
			}
		}
		if (o.pass)
			o.detail = "100000 random inputs";
		return o;
	}

	// 4. k-means against the exhaustive optimum; nearest assignment against brute force.
	Outcome clustering_oracle()
	{
		Outcome o;
		Rng rng(404);
		std::size_t instances = 0;
		for (int t = 0; t < 80; t++)
		{
			const std::size_t n = 1 + rng.below(12), K = 1 + rng.below(3);
			std::vector<double> w(n);
			for (double &x : w)
				x = rng.below(4) == 0 ? std::round(rng.normal() * 4) / 4 : rng.normal();
			KMeansTrace trace;
			const auto a = kmeans_1d(w, K, 100, 0, &trace);
			const double obj = clustering_objective(w, a), best = oracle::exhaustive_kmeans_optimum(w, K);
			for (std::size_t i = 1; i < trace.objective.size(); i++)
				if (trace.objective[i] > trace.objective[i - 1] + 1e-12)
					o.fail("objective increased at iteration " + std::to_string(i));
			if (obj < best - 1e-12 * (1 + best))
				o.fail("objective below the exhaustive optimum");
			if (obj > trace.initial_objective + 1e-12)
				o.fail("objective above its initialization");
			std::vector<double> cb(1 + rng.below(5));
			for (double &c : cb)
				c = std::round(rng.uniform(-2, 2) * 4) / 4;
			const auto nearest = assign_to_codebook(w, cb);
			for (std::size_t i = 0; i < n; i++)
				if (nearest.centroids[nearest.assignment[i]] != cb[oracle::nearest(w[i], cb)])
					o.fail("assign_to_codebook differs from brute force");
			instances++;
		}
		if (o.pass)
			o.detail = std::to_string(instances) + " instances, n <= 12, K <= 3";
		return o;
	}

	void check_quantized(const QuantizedModel &qm, int K, const std::string &tag, Outcome &o)
	{
		for (const auto &a : qm.assignments)
		{
			const auto &w = qm.base.layers[a.layer_index].weights.data;
			if (distinct_count(w) > static_cast<std::size_t>(K))
				o.fail(tag + ": more than K distinct values");
			for (std::size_t i = 0; i < w.size(); i++)
				if (w[i] != a.centroids[a.assignment[i]])
				{
					o.fail(tag + ": weight differs from its centroid");
					break;
				}
		}
		for (const auto &s : codebook_stats(qm))
			if (s.entropy_bits > std::log2(static_cast<double>(K)) + 1e-12)
				o.fail(tag + ": entropy above log2 K");
	}

	Dataset toy_data(std::size_t n, std::uint64_t seed)
	{
		Rng rng(seed);
		Dataset d { Tensor( { n, 2, 4, 4 }), Tensor( { n }) };
		for (std::size_t i = 0; i < n; i++)
		{
			const std::size_t label = i % 4, qy = (label / 2) * 2, qx = (label % 2) * 2;
			d.labels[i] = static_cast<double>(label);
			for (std::size_t c = 0; c < 2; c++)
				for (std::size_t yy = 0; yy < 4; yy++)
					for (std::size_t xx = 0; xx < 4; xx++)
					{
						const bool hot = yy >= qy && yy < qy + 2 && xx >= qx && xx < qx + 2;
						d.images[i * 32 + c * 16 + yy * 4 + xx] = (hot ? 0.6 : -0.2) + 0.3 * rng.normal();
					}
		}
		return d;
	}

	Model toy_model(std::uint64_t seed)
	{
		Model m = build_model( { 2, 4, 4 }, "conv:3,pool,dense:6,dense:4");
		Rng rng(seed);
		initialize(m, rng);
		return m;
	}

	// 5. Invariants after every quantization path, before and after tuning.
	Outcome quantization_invariants()
	{
		Outcome o;
		const Dataset data = toy_data(32, 5);
		std::size_t paths = 0;
		for (int K : { 2, 3, 8 })
			for (LayerGroup g : { LayerGroup::ConvOnly, LayerGroup::DenseOnly, LayerGroup::All })
				for (CodebookMode mode : { CodebookMode::PerLayer, CodebookMode::Shared })
					for (RegKind kind : { RegKind::None, RegKind::Sine, RegKind::Cosine, RegKind::MinL2, RegKind::Exp })
					{
						RegConfig c;
						c.kind = kind;
						c.K = K;
						c.lambda = 0.5;
						c.layer_group = g;
						c.codebook_mode = mode;
						const TrainReport r = train(toy_model(K), data, c, { 0.05, 0.9 }, 2, 1, { 8 });
						QuantizedModel qm;
						if (kind == RegKind::None)
							qm = quantize_model(r.model, c, std::nullopt);
						else
						{
							const auto codes = quantization_codebooks(r.model, c, r.codebooks);
							qm = quantize_model(r.model, c, std::span<const Codebook>(codes));
						}
						const std::string tag = to_string(kind) + "/" + to_string(g) + "/" + to_string(mode) + "/K" + std::to_string(K);
						check_quantized(qm, K, tag, o);
						FinetuneOptions fo;
						fo.batch_size = 8;
						check_quantized(cumulative_finetune(qm, data, { 1e-3, 0.9 }, 1, fo), K, tag + " tuned", o);
						paths++;
					}
		if (o.pass)
			o.detail = std::to_string(paths) + " paths, each checked before and after tuning";
		return o;
	}

	// 6. Centroid gradients against centroid perturbation; sharing after every step.
	Outcome finetune_suite()
	{
		Outcome o;
		const Dataset data = toy_data(12, 6);
		const TrainReport r = train(toy_model(4), data, RegConfig { }, { 0.05, 0.9 }, 3, 0, { 4 });
		RegConfig c;
		c.K = 3;
		QuantizedModel qm = quantize_model(r.model, c, std::nullopt);
		const auto [x, y] = gather_batch(data, epoch_order(data.size(), 0, 0));
		loss_and_grad(qm.base, x, y);
		std::size_t checked = 0;
		double worst = 0.0;
		for (auto &a : qm.assignments)
		{
			auto &layer = qm.base.layers[a.layer_index];
			const auto g = centroid_gradients(a, layer.grad_weights.values());
			for (std::size_t j = 0; j < a.centroids.size(); j++)
			{
				const auto f = [&] {
					write_shared_weights(layer, a);
					return loss_only(qm.base, x, y);
				};
				const double fd = oracle::central_difference(f, &a.centroids[j], 1e-6);
				write_shared_weights(layer, a);
				worst = std::max(worst, oracle::relative_error(g[j], fd, 1e-7));
				checked++;
			}
		}
		if (worst > 1e-3)
			o.fail("centroid gradient rel err " + fmt(worst));

		std::size_t steps = 0;
		FinetuneOptions fo;
		fo.batch_size = 4;
		fo.on_step = [&](const QuantizedModel &q, std::size_t, std::size_t) {
			steps++;
			for (const auto &a : q.assignments)
			{
				const auto &w = q.base.layers[a.layer_index].weights.data;
				for (std::size_t i = 0; i < w.size(); i++)
					if (w[i] != a.centroids[a.assignment[i]])
					{
						o.fail("sharing broken at step " + std::to_string(steps));
						return;
					}
			}
		};
		cumulative_finetune(qm, data, { 0.01, 0.9 }, 3, fo);
		if (o.pass)
			o.detail = std::to_string(checked) + " centroids, max rel err " + fmt(worst, 3) + "; sharing held over " + std::to_string(steps) + " steps";
		return o;
	}

	// Desk protocol preset.
	ExperimentConfig desk_config(const fs::path &data, const fs::path &out)
	{
		ExperimentConfig cfg;
		cfg.data_dir = data;
		cfg.train_size = 5000;
		cfg.test_size = 1000;
		cfg.reg.K = 8;
		cfg.reg.layer_group = LayerGroup::All;
		cfg.reg.lambda = 3.0;
		cfg.reg.w_min = -0.5;
		cfg.reg.w_max = 0.5;
		cfg.epochs = 12;
		cfg.tune_epochs = 2;
		cfg.seeds = { 0, 1, 2 };
		cfg.out_dir = out;
		return cfg;
	}

	// 7 and 8 share one desk-scale run.
	std::pair<Outcome, Outcome> desk_protocol(const fs::path &work)
	{
		Outcome o7, o8;
		fs::path data;
		std::string source;
		if (const char *env = std::getenv("QAREG_CIFAR_DIR"); env && *env)
		{
			data = env;
			source = "CIFAR-10 at " + data.string();
		} else
		{
			data = work / "synthetic";
			write_synthetic_cifar_dir(data, 5000, 1000, 1);
			source = "synthetic CIFAR-format data (set QAREG_CIFAR_DIR for CIFAR-10)";
		}
		std::cout << "desk protocol dataset: " << source << std::endl;
		const auto t0 = std::chrono::steady_clock::now();
		ExperimentResult res;
		try
		{
			res = run_experiment(desk_config(data, work / "desk"), &std::cout);
			emit_plots(res.rows, work / "desk");
		} catch (const Error &e)
		{
			o7.fail(e.what());
			o8.fail(e.what());
			return { o7, o8 };
		}
		const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;

		std::size_t winners = 0;
		std::ostringstream summary;
		for (const auto &r : res.rows)
		{
			if (r.seed != "mean")
				continue;
			const double gap = r.baseline_post - r.reg_post;
			const bool pre_ok = r.ok() && r.ratio_pre > 1.0, post_ok = r.ok() && gap <= 0.02;
			winners += pre_ok && post_ok;
			summary << ' ' << r.regularizer << "(ratio_pre " << fmt(r.ratio_pre) << ", post gap " << fmt(100 * gap, 3) << "pp)";
		}
		if (winners < 3)
			o7.fail(std::to_string(winners) + "/4 regularizers meet both conditions;" + summary.str());
		else
			o7.detail = std::to_string(winners) + "/4 regularizers meet both conditions;" + summary.str();
		o7.detail += "; " + fmt(minutes, 3) + " min; outputs in " + (work / "desk").string();

		std::size_t compared = 0;
		for (const auto &r : res.rows)
		{
			if (r.seed == "mean" || (r.regularizer != "minl2" && r.regularizer != "exp"))
				continue;
			compared++;
			if (!r.ok() || !(r.reg_mean_dist < r.baseline_mean_dist))
				o8.fail(r.regularizer + " seed " + r.seed + ": mean distance " + fmt(r.reg_mean_dist) + " vs baseline " + fmt(r.baseline_mean_dist));
		}
		if (compared != 6)
			o8.fail("expected 6 (regularizer, seed) pairs, got " + std::to_string(compared));
		if (o8.pass)
			o8.detail = "minl2 and exp closer to their representatives than the paired baseline on all 3 seeds";
		return { o7, o8 };
	}

	// 9. Same seed, same bytes.
	Outcome determinism(const fs::path &work)
	{
		Outcome o;
		const fs::path data = work / "det_data";
		write_synthetic_cifar_dir(data, 300, 100, 9);
		std::vector<std::string> outputs[2];
		for (int run = 0; run < 2; run++)
		{
			ExperimentConfig cfg = desk_config(data, work / ("det_" + std::to_string(run)));
			cfg.train_size = 300;
			cfg.test_size = 100;
			cfg.epochs = 2;
			cfg.tune_epochs = 1;
			cfg.seeds = { 4 };
			fs::remove_all(cfg.out_dir);
			const auto res = run_experiment(cfg);
			emit_plots(res.rows, cfg.out_dir);
			for (const auto &entry : fs::directory_iterator(cfg.out_dir))
				outputs[run].push_back(entry.path().filename().string() + "\n" + slurp(entry.path()));
			std::sort(outputs[run].begin(), outputs[run].end());
		}
		if (outputs[0].size() < 3)
			o.fail("expected metrics, training log and plot files");
		else if (outputs[0] != outputs[1])
			o.fail("outputs differ between identical runs");
		else
			o.detail = std::to_string(outputs[0].size()) + " output files byte-identical across two runs";
		return o;
	}

	void report(int id, const Outcome &o, bool &all)
	{
		std::cout << "CRITERION " << id << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
		all &= o.pass;
	}

	template<class F>
	Outcome guarded(F &&f)
	{
		try
		{
			return f();
		} catch (const std::exception &e)
		{
			Outcome o;
			o.fail(std::string("exception: ") + e.what());
			return o;
		}
	}
}

int main()
{
	const fs::path work = fs::temp_directory_path() / "qareg_acceptance";
	fs::remove_all(work);
	fs::create_directories(work);
	bool all = true;
	report(1, guarded(gradient_suite), all);
	report(2, guarded(minima_suite), all);
	report(3, guarded(bound_suite), all);
	report(4, guarded(clustering_oracle), all);
	report(5, guarded(quantization_invariants), all);
	report(6, guarded(finetune_suite), all);
	std::pair<Outcome, Outcome> desk;
	try
	{
		desk = desk_protocol(work);
	} catch (const std::exception &e)
	{
		desk.first.fail(e.what());
		desk.second.fail(e.what());
	}
	report(7, desk.first, all);
	report(8, desk.second, all);
	report(9, guarded([&] {
		return determinism(work);
	}), all);
	return all ? 0 : 1;
}
