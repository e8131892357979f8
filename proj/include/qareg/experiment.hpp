/*
 * experiment.hpp
 *
 * Paired baseline-vs-regularized protocol. For every seed an unregularized
 * baseline is trained, clustered with per-layer k-means and fine-tuned; each
 * requested regularizer trains a twin from the same initialization and batch
 * order, is quantized through its own representatives, and is fine-tuned the
 * same way. Accuracy ratios are regularized / baseline.
 */

#ifndef QAREG_EXPERIMENT_HPP_
#define QAREG_EXPERIMENT_HPP_

#include <qareg/cifar.hpp>
#include <qareg/nn.hpp>
#include <qareg/quantizer.hpp>
#include <qareg/regularizers.hpp>
#include <qareg/training.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace qareg
{

	struct ExperimentConfig
	{
			std::filesystem::path data_dir;
			std::size_t train_size = 5000;
			std::size_t test_size = 1000;
			std::string arch = "conv:16,pool,conv:32,pool,dense:128,dense:10";
			RegConfig reg;  // kind is ignored, see `kinds`
			std::vector<RegKind> kinds = { RegKind::Sine, RegKind::Cosine, RegKind::MinL2, RegKind::Exp };
			std::size_t epochs = 10;
			std::size_t tune_epochs = 5;
			std::size_t batch_size = 32;
			double learning_rate = 0.01;
			double momentum = 0.9;
			double tune_learning_rate = 1e-5;
			std::vector<std::uint64_t> seeds = { 0, 1, 2 };
			std::filesystem::path out_dir = "results";

			std::string id() const
			{
				return to_string(reg.layer_group) + "-K" + std::to_string(reg.K);
			}

			void validate() const
			{
				if (seeds.empty())
					throw ConfigError("seed list is empty");
				if (kinds.empty())
					throw ConfigError("no regularizer requested");
				for (auto k : kinds)
					if (k == RegKind::None)
						throw ConfigError("'none' is the baseline and cannot be listed as a regularizer");
				if (train_size == 0 || test_size == 0)
					throw ConfigError("split sizes must be positive");
				if (train_size > 5 * cifar::records_per_file || test_size > cifar::records_per_file)
					throw ConfigError("split sizes exceed the 50000/10000 CIFAR-10 records");
				if (epochs == 0)
					throw ConfigError("epochs must be positive");
				if (batch_size == 0)
					throw ConfigError("batch size must be positive");
				if (!(tune_learning_rate > 0.0))
					throw ConfigError("tuning learning rate must be positive");
				RegConfig probe = reg;
				probe.kind = RegKind::MinL2;
				if (!(probe.lambda > 0.0))
					throw ConfigError("lambda must be positive");
				probe.validate();
				OptimizerState { learning_rate, momentum }.validate();
				const Model m = build_model( { cifar::channels, cifar::side, cifar::side }, arch);
				if (selected_layers(m, reg.layer_group).empty())
					throw ConfigError("layer group '" + to_string(reg.layer_group) + "' selects no layers of architecture '" + arch + "'");
			}
	};

	struct MetricsRow
	{
			std::string config_id;
			std::string regularizer;
			std::string layers;
			int K = 0;
			std::string seed;  // decimal seed or "mean"
			std::string status = "ok";
			double baseline_full = 0.0;
			double baseline_pre = 0.0;
			double baseline_post = 0.0;
			double reg_full = 0.0;
			double reg_pre = 0.0;
			double reg_post = 0.0;
			double ratio_pre = 0.0;
			double ratio_post = 0.0;
			double baseline_mean_dist = 0.0;
			double reg_mean_dist = 0.0;
			std::vector<double> baseline_distinct;  // per quantized layer
			std::vector<double> reg_distinct;
			std::vector<double> baseline_entropy;
			std::vector<double> reg_entropy;
			std::string baseline_hash;
			std::string reg_hash;

			bool ok() const
			{
				return status == "ok";
			}
			friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
	};

	inline double accuracy_ratio(double regularized, double baseline)
	{
		if (baseline > 0.0)
			return regularized / baseline;
		return regularized > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
	}

	/// FNV-1a over every hyperparameter of a run except the regularizer kind and lambda.
	inline std::string pairing_hash(const ExperimentConfig &cfg, const RegConfig &reg, std::uint64_t seed)
	{
		std::ostringstream ss;
		ss << cfg.arch << '|' << cfg.train_size << '|' << cfg.test_size << '|' << reg.K << '|' << format_real(reg.w_min) << '|' << format_real(reg.w_max) << '|'
				<< to_string(reg.layer_group) << '|' << to_string(reg.codebook_mode) << '|' << cfg.epochs << '|' << cfg.tune_epochs << '|' << cfg.batch_size
				<< '|' << format_real(cfg.learning_rate) << '|' << format_real(cfg.momentum) << '|' << format_real(cfg.tune_learning_rate) << '|' << seed;
		std::uint64_t h = 0xcbf29ce484222325ULL;
		for (unsigned char c : ss.str())
		{
			h ^= c;
			h *= 0x100000001b3ULL;
		}
		char buf[17];
		std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
		return buf;
	}

	// ---- CSV ---------------------------------------------------------------

	namespace detail
	{
		inline std::string join_reals(const std::vector<double> &v)
		{
			std::string s;
			for (std::size_t i = 0; i < v.size(); i++)
				s += (i ? ";" : "") + format_real(v[i]);
			return s;
		}
		inline std::vector<double> split_reals(const std::string &s)
		{
			std::vector<double> v;
			std::string tok;
			std::istringstream ss(s);
			while (std::getline(ss, tok, ';'))
				if (!tok.empty())
					v.push_back(std::strtod(tok.c_str(), nullptr));
			return v;
		}
		/// Quotes a field when it contains a comma or quote.
		inline std::string csv_field(const std::string &s)
		{
			if (s.find_first_of(",\"\n") == std::string::npos)
				return s;
			std::string q = "\"";
			for (char c : s)
				q += (c == '"') ? std::string("\"\"") : std::string(1, c);
			return q + "\"";
		}
		inline std::vector<std::string> split_csv_line(const std::string &line)
		{
			std::vector<std::string> out;
			std::string cur;
			bool quoted = false;
			for (std::size_t i = 0; i < line.size(); i++)
			{
				const char c = line[i];
				if (quoted)
				{
					if (c == '"' && i + 1 < line.size() && line[i + 1] == '"')
					{
						cur += '"';
						i++;
					}
					else if (c == '"')
						quoted = false;
					else
						cur += c;
				}
				else if (c == '"')
					quoted = true;
				else if (c == ',')
				{
					out.push_back(cur);
					cur.clear();
				}
				else
					cur += c;
			}
			out.push_back(cur);
			return out;
		}
	}

	inline const std::vector<std::string>& metrics_columns()
	{
		static const std::vector<std::string> cols = { "config_id", "regularizer", "layers", "K", "seed", "status", "baseline_full", "baseline_pre",
				"baseline_post", "reg_full", "reg_pre", "reg_post", "ratio_pre", "ratio_post", "baseline_mean_dist", "reg_mean_dist", "baseline_distinct",
				"reg_distinct", "baseline_entropy_bits", "reg_entropy_bits", "baseline_hash", "reg_hash" };
		return cols;
	}

	inline std::string to_csv_line(const MetricsRow &r)
	{
		using detail::csv_field;
		const std::vector<std::string> f = { r.config_id, r.regularizer, r.layers, std::to_string(r.K), r.seed, r.status, format_real(r.baseline_full),
				format_real(r.baseline_pre), format_real(r.baseline_post), format_real(r.reg_full), format_real(r.reg_pre), format_real(r.reg_post),
				format_real(r.ratio_pre), format_real(r.ratio_post), format_real(r.baseline_mean_dist), format_real(r.reg_mean_dist),
				detail::join_reals(r.baseline_distinct), detail::join_reals(r.reg_distinct), detail::join_reals(r.baseline_entropy),
				detail::join_reals(r.reg_entropy), r.baseline_hash, r.reg_hash };
		std::string line;
		for (std::size_t i = 0; i < f.size(); i++)
			line += (i ? "," : "") + csv_field(f[i]);
		return line;
	}

	inline void write_metrics_csv(const std::vector<MetricsRow> &rows, const std::filesystem::path &path)
	{
		if (path.has_parent_path())
			std::filesystem::create_directories(path.parent_path());
		std::ofstream out(path, std::ios::binary);
		if (!out)
			throw IoError("cannot write '" + path.string() + "'");
		const auto &cols = metrics_columns();
		for (std::size_t i = 0; i < cols.size(); i++)
			out << (i ? "," : "") << cols[i];
		out << '\n';
		for (const auto &r : rows)
			out << to_csv_line(r) << '\n';
		if (!out)
			throw IoError("short write to '" + path.string() + "'");
	}

	inline std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path &path)
	{
		std::ifstream in(path, std::ios::binary);
		if (!in)
			throw IoError("cannot open '" + path.string() + "'");
		std::string line;
		std::getline(in, line);
		if (detail::split_csv_line(line) != metrics_columns())
			throw FormatError(path.string() + ": unexpected header");
		std::vector<MetricsRow> rows;
		std::size_t line_no = 1;
		while (std::getline(in, line))
		{
			line_no++;
			if (line.empty())
				continue;
			const auto f = detail::split_csv_line(line);
			if (f.size() != metrics_columns().size())
				throw FormatError(path.string() + ": line " + std::to_string(line_no) + " has " + std::to_string(f.size()) + " fields");
			auto real = [](const std::string &s) {
				return std::strtod(s.c_str(), nullptr);
			};
			MetricsRow r;
			r.config_id = f[0];
			r.regularizer = f[1];
			r.layers = f[2];
			r.K = std::stoi(f[3]);
			r.seed = f[4];
			r.status = f[5];
			r.baseline_full = real(f[6]);
			r.baseline_pre = real(f[7]);
			r.baseline_post = real(f[8]);
			r.reg_full = real(f[9]);
			r.reg_pre = real(f[10]);
			r.reg_post = real(f[11]);
			r.ratio_pre = real(f[12]);
			r.ratio_post = real(f[13]);
			r.baseline_mean_dist = real(f[14]);
			r.reg_mean_dist = real(f[15]);
			r.baseline_distinct = detail::split_reals(f[16]);
			r.reg_distinct = detail::split_reals(f[17]);
			r.baseline_entropy = detail::split_reals(f[18]);
			r.reg_entropy = detail::split_reals(f[19]);
			r.baseline_hash = f[20];
			r.reg_hash = f[21];
			rows.push_back(std::move(r));
		}
		return rows;
	}

	/// Arithmetic mean of the successful rows (element-wise for per-layer lists).
	inline MetricsRow mean_row(const std::vector<MetricsRow> &seed_rows)
	{
		std::vector<const MetricsRow*> ok;
		for (const auto &r : seed_rows)
			if (r.ok())
				ok.push_back(&r);
		if (seed_rows.empty())
			throw InputError("no rows to average");
		MetricsRow m = seed_rows.front();
		m.seed = "mean";
		m.baseline_hash = m.reg_hash = "";
		if (ok.empty())
		{
			m.status = "failed: every seed failed";
			return m;
		}
		m.status = "ok";
		const double n = static_cast<double>(ok.size());
		auto avg = [&](double MetricsRow::*field) {
			double s = 0.0;
			for (auto *r : ok)
				s += r->*field;
			return s / n;
		};
		auto avg_list = [&](std::vector<double> MetricsRow::*field) {
			std::vector<double> s((ok.front()->*field).size(), 0.0);
			for (auto *r : ok)
				for (std::size_t i = 0; i < s.size() && i < (r->*field).size(); i++)
					s[i] += (r->*field)[i];
			for (double &x : s)
				x /= n;
			return s;
		};
		m.baseline_full = avg(&MetricsRow::baseline_full);
		m.baseline_pre = avg(&MetricsRow::baseline_pre);
		m.baseline_post = avg(&MetricsRow::baseline_post);
		m.reg_full = avg(&MetricsRow::reg_full);
		m.reg_pre = avg(&MetricsRow::reg_pre);
		m.reg_post = avg(&MetricsRow::reg_post);
		m.ratio_pre = avg(&MetricsRow::ratio_pre);
		m.ratio_post = avg(&MetricsRow::ratio_post);
		m.baseline_mean_dist = avg(&MetricsRow::baseline_mean_dist);
		m.reg_mean_dist = avg(&MetricsRow::reg_mean_dist);
		m.baseline_distinct = avg_list(&MetricsRow::baseline_distinct);
		m.reg_distinct = avg_list(&MetricsRow::reg_distinct);
		m.baseline_entropy = avg_list(&MetricsRow::baseline_entropy);
		m.reg_entropy = avg_list(&MetricsRow::reg_entropy);
		return m;
	}

	// ---- protocol ----------------------------------------------------------

	/// Full-precision, pre-tuning and post-tuning accuracy of one trained model.
	struct StageAccuracy
	{
			double full = 0.0;
			double pre = 0.0;
			double post = 0.0;
			QuantizedModel quantized;
			QuantizedModel tuned;
	};

	inline std::vector<double> stats_distinct(const QuantizedModel &qm)
	{
		std::vector<double> v;
		for (const auto &s : codebook_stats(qm))
			v.push_back(static_cast<double>(s.distinct_values));
		return v;
	}

	inline std::vector<double> stats_entropy(const QuantizedModel &qm)
	{
		std::vector<double> v;
		for (const auto &s : codebook_stats(qm))
			v.push_back(s.entropy_bits);
		return v;
	}

	/// Representatives the regularized twin quantizes onto (static minima or learned u).
	inline std::vector<Codebook> quantization_codebooks(const Model &model, const RegConfig &reg, const std::vector<Codebook> &learned)
	{
		if (is_dynamic(reg.kind))
			return learned;
		const Codebook fixed(static_minima(reg.kind, reg.K, reg.w_min, reg.w_max));
		return std::vector<Codebook>(reg.codebook_mode == CodebookMode::Shared ? 1 : require_selected_layers(model, reg.layer_group).size(), fixed);
	}

	struct ExperimentResult
	{
			std::vector<MetricsRow> rows;  // per-seed rows then one mean row per regularizer
			std::filesystem::path metrics_csv;
			std::filesystem::path train_log_csv;
	};

	inline ExperimentResult run_experiment_on(const ExperimentConfig &cfg, const CifarSplits &data, std::ostream *log = nullptr)
	{
		cfg.validate();
		const Shape input { cifar::channels, cifar::side, cifar::side };
		auto say = [&](const std::string &msg) {
			if (log)
				*log << msg << std::endl;
		};

		std::ostringstream train_log;
		train_log << "run,seed,epoch,task_loss,reg_value,total_objective,train_accuracy\n";
		auto log_records = [&](const std::string &run, std::uint64_t seed, const TrainReport &rep) {
			for (const auto &r : rep.records)
				train_log << run << ',' << seed << ',' << r.epoch << ',' << format_real(r.task_loss) << ',' << format_real(r.reg_value) << ','
						<< format_real(r.total_objective) << ',' << format_real(r.train_accuracy) << '\n';
		};

		const OptimizerState opt { cfg.learning_rate, cfg.momentum };
		const OptimizerState tune_opt { cfg.tune_learning_rate, cfg.momentum };

		std::map<RegKind, std::vector<MetricsRow>> per_kind;
		for (std::uint64_t seed : cfg.seeds)
		{
			Model init = build_model(input, cfg.arch);
			Rng init_rng(mix_seed(seed, 0x1417));
			initialize(init, init_rng);

			RegConfig base_reg = cfg.reg;
			base_reg.kind = RegKind::None;
			const std::string base_hash = pairing_hash(cfg, base_reg, seed);

			FinetuneOptions fopt;
			fopt.batch_size = cfg.batch_size;
			fopt.seed = seed;

			std::optional<StageAccuracy> base;
			std::string base_failure;
			TrainReport base_rep;
			const auto t0 = std::chrono::steady_clock::now();
			try
			{
				base_rep = train(init, data.train, base_reg, opt, cfg.epochs, seed, { cfg.batch_size });
				log_records("baseline", seed, base_rep);
				StageAccuracy s;
				s.full = evaluate(base_rep.model, data.test);
				s.quantized = quantize_model(base_rep.model, base_reg, std::nullopt);
				s.pre = evaluate(s.quantized, data.test);
				s.tuned = cumulative_finetune(s.quantized, data.train, tune_opt, cfg.tune_epochs, fopt);
				s.post = evaluate(s.tuned, data.test);
				base = std::move(s);
				say("[seed " + std::to_string(seed) + "] baseline full " + format_real(base->full) + " pre " + format_real(base->pre) + " post "
						+ format_real(base->post) + " ("
						+ std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s)");
			} catch (const DivergenceError &e)
			{
				base_failure = std::string("failed: baseline ") + e.what();
				say("[seed " + std::to_string(seed) + "] " + base_failure);
			}

			for (RegKind kind : cfg.kinds)
			{
				RegConfig reg = cfg.reg;
				reg.kind = kind;
				MetricsRow row;
				row.config_id = cfg.id();
				row.regularizer = to_string(kind);
				row.layers = to_string(reg.layer_group);
				row.K = reg.K;
				row.seed = std::to_string(seed);
				row.baseline_hash = base_hash;
				row.reg_hash = pairing_hash(cfg, reg, seed);
				const double nan = std::numeric_limits<double>::quiet_NaN();
				row.baseline_full = row.baseline_pre = row.baseline_post = row.reg_full = row.reg_pre = row.reg_post = nan;
				row.ratio_pre = row.ratio_post = row.baseline_mean_dist = row.reg_mean_dist = nan;
				if (!base)
				{
					row.status = base_failure;
					per_kind[kind].push_back(row);
					continue;
				}
				row.baseline_full = base->full;
				row.baseline_pre = base->pre;
				row.baseline_post = base->post;
				row.baseline_distinct = stats_distinct(base->quantized);
				row.baseline_entropy = stats_entropy(base->quantized);
				const auto t1 = std::chrono::steady_clock::now();
				try
				{
					const TrainReport rep = train(init, data.train, reg, opt, cfg.epochs, seed, { cfg.batch_size });
					log_records(to_string(kind), seed, rep);
					const auto codes = quantization_codebooks(rep.model, reg, rep.codebooks);
					const QuantizedModel q = quantize_model(rep.model, reg, std::span<const Codebook>(codes));
					const QuantizedModel t = cumulative_finetune(q, data.train, tune_opt, cfg.tune_epochs, fopt);
					row.reg_full = evaluate(rep.model, data.test);
					row.reg_pre = evaluate(q, data.test);
					row.reg_post = evaluate(t, data.test);
					row.ratio_pre = accuracy_ratio(row.reg_pre, row.baseline_pre);
					row.ratio_post = accuracy_ratio(row.reg_post, row.baseline_post);
					row.reg_distinct = stats_distinct(q);
					row.reg_entropy = stats_entropy(q);
					// both twins are measured against the regularized twin's final representatives
					row.reg_mean_dist = mean_distance_to_codebook(rep.model, reg.layer_group, reg.codebook_mode, codes);
					row.baseline_mean_dist = mean_distance_to_codebook(base_rep.model, reg.layer_group, reg.codebook_mode, codes);
					say("[seed " + std::to_string(seed) + "] " + to_string(kind) + " full " + format_real(row.reg_full) + " pre " + format_real(row.reg_pre)
							+ " post " + format_real(row.reg_post) + " ratio_pre " + format_real(row.ratio_pre) + " ("
							+ std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count()) + " s)");
				} catch (const DivergenceError &e)
				{
					row.status = std::string("failed: ") + e.what();
					say("[seed " + std::to_string(seed) + "] " + to_string(kind) + " " + row.status);
				}
				per_kind[kind].push_back(row);
			}
		}

		ExperimentResult result;
		for (RegKind kind : cfg.kinds)
			result.rows.insert(result.rows.end(), per_kind[kind].begin(), per_kind[kind].end());
		for (RegKind kind : cfg.kinds)
			result.rows.push_back(mean_row(per_kind[kind]));

		std::filesystem::create_directories(cfg.out_dir);
		result.metrics_csv = cfg.out_dir / "metrics.csv";
		result.train_log_csv = cfg.out_dir / "train_log.csv";
		write_metrics_csv(result.rows, result.metrics_csv);
		std::ofstream tl(result.train_log_csv, std::ios::binary);
		if (!tl)
			throw IoError("cannot write '" + result.train_log_csv.string() + "'");
		tl << train_log.str();
		return result;
	}

	inline ExperimentResult run_experiment(const ExperimentConfig &cfg, std::ostream *log = nullptr)
	{
		cfg.validate();
		const CifarSplits data = load_cifar10(cfg.data_dir, cfg.train_size, cfg.test_size);
		return run_experiment_on(cfg, data, log);
	}

	// ---- plots -------------------------------------------------------------

	struct PlotBar
	{
			std::string regularizer;
			double ratio_pre = 0.0;
			double ratio_post = 0.0;
			double baseline_accuracy = 0.0;
	};

	namespace detail
	{
		inline std::string fixed3(double v)
		{
			char buf[32];
			std::snprintf(buf, sizeof(buf), "%.3f", v);
			return buf;
		}
		inline std::string xml_escape(const std::string &s)
		{
			std::string out;
			for (char c : s)
				switch (c)
				{
					case '<':
						out += "&lt;";
						break;
					case '>':
						out += "&gt;";
						break;
					case '&':
						out += "&amp;";
						break;
					default:
						out += c;
				}
			return out;
		}
	}

	/*
	 * Grouped bar chart: for each regularizer a pre-tuning and a post-tuning
	 * ratio bar, a dotted tie line at ratio 1 and the baseline accuracy on a
	 * secondary [0, 1] axis.
	 */
	inline std::string render_ratio_svg(const std::vector<PlotBar> &bars, const std::string &title)
	{
		constexpr double width = 640, height = 400, left = 60, right = 60, top = 40, bottom = 60;
		const double plot_w = width - left - right, plot_h = height - top - bottom;
		double ymax = 1.25;
		for (const auto &b : bars)
			for (double v : { b.ratio_pre, b.ratio_post })
				if (std::isfinite(v))
					ymax = std::max(ymax, v * 1.1);
		ymax = std::ceil(ymax * 4.0) / 4.0;
		auto y_of = [&](double ratio) {
			const double r = std::isfinite(ratio) ? std::clamp(ratio, 0.0, ymax) : 0.0;
			return detail::fixed3(top + plot_h * (1.0 - r / ymax));
		};
		auto y_acc = [&](double acc) {
			return detail::fixed3(top + plot_h * (1.0 - std::clamp(acc, 0.0, 1.0)));
		};
		using detail::fixed3;

		std::ostringstream s;
		s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << ' ' << height
				<< "\">\n";
		s << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
		s << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" << detail::xml_escape(title)
				<< "</text>\n";
		s << "<line class=\"axis\" x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";
		s << "<line class=\"axis\" x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\"" << top + plot_h
				<< "\" stroke=\"black\"/>\n";
		s << "<line class=\"axis2\" x1=\"" << left + plot_w << "\" y1=\"" << top << "\" x2=\"" << left + plot_w << "\" y2=\"" << top + plot_h
				<< "\" stroke=\"gray\"/>\n";
		for (int t = 0; t <= 4; t++)
		{
			const double r = ymax * t / 4.0;
			s << "<text x=\"" << left - 6 << "\" y=\"" << y_of(r) << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fixed3(r)
					<< "</text>\n";
			const double a = t / 4.0;
			s << "<text x=\"" << left + plot_w + 6 << "\" y=\"" << y_acc(a) << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"gray\">" << fixed3(a)
					<< "</text>\n";
		}

		const double group_w = plot_w / static_cast<double>(std::max<std::size_t>(bars.size(), 1));
		const double bar_w = group_w * 0.3;
		for (std::size_t i = 0; i < bars.size(); i++)
		{
			const auto &b = bars[i];
			const double gx = left + group_w * static_cast<double>(i);
			const double x_pre = gx + group_w * 0.15, x_post = x_pre + bar_w + group_w * 0.1;
			const std::string base_y = fixed3(top + plot_h);
			auto bar = [&](const char *cls, double x, double ratio, const char *colour) {
				const std::string y = y_of(ratio);
				const double h = std::stod(base_y) - std::stod(y);
				s << "<rect class=\"" << cls << "\" data-regularizer=\"" << detail::xml_escape(b.regularizer) << "\" data-ratio=\"" << format_real(ratio)
						<< "\" x=\"" << fixed3(x) << "\" y=\"" << y << "\" width=\"" << fixed3(bar_w) << "\" height=\"" << fixed3(h) << "\" fill=\"" << colour
						<< "\"/>\n";
			};
			bar("bar-pre", x_pre, b.ratio_pre, "#4c72b0");
			bar("bar-post", x_post, b.ratio_post, "#dd8452");
			s << "<line class=\"baseline-acc\" x1=\"" << fixed3(gx + group_w * 0.1) << "\" y1=\"" << y_acc(b.baseline_accuracy) << "\" x2=\""
					<< fixed3(gx + group_w * 0.9) << "\" y2=\"" << y_acc(b.baseline_accuracy) << "\" stroke=\"gray\" stroke-width=\"2\"/>\n";
			s << "<text x=\"" << fixed3(gx + group_w / 2) << "\" y=\"" << top + plot_h + 18
					<< "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << detail::xml_escape(b.regularizer) << "</text>\n";
		}
		s << "<line class=\"tie\" x1=\"" << left << "\" y1=\"" << y_of(1.0) << "\" x2=\"" << left + plot_w << "\" y2=\"" << y_of(1.0)
				<< "\" stroke=\"black\" stroke-dasharray=\"2,3\"/>\n";
		s << "<text x=\"" << left << "\" y=\"" << height - 16 << "\" font-family=\"sans-serif\" font-size=\"11\">"
				<< "accuracy ratio (blue: pre-tuning, orange: post-tuning); gray: baseline accuracy, right axis</text>\n";
		s << "</svg>\n";
		return s.str();
	}

	/*
	 * One CSV and one SVG per (layer group, K): columns regularizer,
	 * mean_ratio_pre, mean_ratio_post, baseline_accuracy (baseline
	 * full-precision test accuracy). Mean rows are used when present,
	 * otherwise successful seed rows are averaged. Returns the written paths.
	 */
	inline std::vector<std::filesystem::path> emit_plots(const std::vector<MetricsRow> &rows, const std::filesystem::path &out_dir)
	{
		if (rows.empty())
			throw InputError("no metrics rows to plot");
		std::error_code ec;
		std::filesystem::create_directories(out_dir, ec);
		if (ec || !std::filesystem::is_directory(out_dir))
			throw IoError("cannot create output directory '" + out_dir.string() + "'");

		// (layers, K) -> regularizer order of first appearance
		std::map<std::pair<std::string, int>, std::vector<std::string>> order;
		std::map<std::tuple<std::string, int, std::string>, std::vector<MetricsRow>> seeds;
		std::map<std::tuple<std::string, int, std::string>, MetricsRow> means;
		for (const auto &r : rows)
		{
			auto &o = order[ { r.layers, r.K }];
			if (std::find(o.begin(), o.end(), r.regularizer) == o.end())
				o.push_back(r.regularizer);
			const auto key = std::make_tuple(r.layers, r.K, r.regularizer);
			if (r.seed == "mean")
				means[key] = r;
			else
				seeds[key].push_back(r);
		}

		std::vector<std::filesystem::path> written;
		for (const auto &[group, regs] : order)
		{
			std::vector<PlotBar> bars;
			for (const auto &name : regs)
			{
				const auto key = std::make_tuple(group.first, group.second, name);
				const MetricsRow m = means.count(key) ? means.at(key) : mean_row(seeds.at(key));
				bars.push_back( { name, m.ratio_pre, m.ratio_post, m.baseline_full });
			}
			const std::string stem = "plot_" + group.first + "_K" + std::to_string(group.second);
			const auto csv_path = out_dir / (stem + ".csv"), svg_path = out_dir / (stem + ".svg");
			std::ofstream csv(csv_path, std::ios::binary);
			std::ofstream svg(svg_path, std::ios::binary);
			if (!csv || !svg)
				throw IoError("cannot write plots into '" + out_dir.string() + "'");
			csv << "regularizer,mean_ratio_pre,mean_ratio_post,baseline_accuracy\n";
			for (const auto &b : bars)
				csv << detail::csv_field(b.regularizer) << ',' << format_real(b.ratio_pre) << ',' << format_real(b.ratio_post) << ','
						<< format_real(b.baseline_accuracy) << '\n';
			svg << render_ratio_svg(bars, "Accuracy ratio, layers=" + group.first + ", K=" + std::to_string(group.second));
			if (!csv || !svg)
				throw IoError("short write to plots in '" + out_dir.string() + "'");
			written.push_back(csv_path);
			written.push_back(svg_path);
		}
		return written;
	}

} /* namespace qareg */

#endif /* QAREG_EXPERIMENT_HPP_ */
