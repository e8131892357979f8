// qareg command-line front end: train, quantize, tune, experiment, plots, synth.

#include <qareg/qareg.hpp>

#ifdef QAREG_CLI11_PACKAGE
#include <CLI/CLI.hpp>
#else
#include <CLI11.hpp>
#endif

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace qareg;

namespace
{

	struct Common
	{
			std::string reg = "none";
			int k = 8;
			double wmin = -1.0, wmax = 1.0, lambda = 0.1;
			std::string layers = "all";
			std::string codebook = "per-layer";
			std::vector<std::uint64_t> seeds { 0 };
			std::size_t epochs = 10, tune_epochs = 5, batch = 32;
			std::size_t train_size = 5000, test_size = 1000;
			double lr = 0.01, momentum = 0.9, tune_lr = 1e-5;
			std::string arch = "conv:16,pool,conv:32,pool,dense:128,dense:10";
			std::string data = "data/cifar-10-batches-bin";
			std::string out = "results";
	};

	void add_reg_flags(CLI::App *app, Common &c)
	{
		app->add_option("--reg", c.reg, "Regularizer")->check(CLI::IsMember( { "none", "sine", "cos", "minl2", "exp" }));
		app->add_option("--k", c.k, "Number of representatives K")->check(CLI::PositiveNumber);
		app->add_option("--wmin", c.wmin, "Lower end of the weight range");
		app->add_option("--wmax", c.wmax, "Upper end of the weight range");
		app->add_option("--lambda", c.lambda, "Regularization strength");
		app->add_option("--layers", c.layers, "Regularized/quantized layers")->check(CLI::IsMember( { "conv", "dense", "all" }));
		app->add_option("--codebook", c.codebook, "Codebook sharing")->check(CLI::IsMember( { "per-layer", "shared" }));
	}

	void add_data_flags(CLI::App *app, Common &c)
	{
		app->add_option("--data", c.data, "Directory holding the CIFAR-10 binary batches");
		app->add_option("--train-size", c.train_size, "Training examples taken from the front of the training batches");
		app->add_option("--test-size", c.test_size, "Test examples taken from the front of test_batch.bin");
	}

	void add_train_flags(CLI::App *app, Common &c)
	{
		app->add_option("--epochs", c.epochs, "Training epochs");
		app->add_option("--batch", c.batch, "Mini-batch size")->check(CLI::PositiveNumber);
		app->add_option("--lr", c.lr, "Learning rate");
		app->add_option("--momentum", c.momentum, "SGD momentum");
		app->add_option("--arch", c.arch, "Architecture, e.g. conv:16,pool,dense:10");
	}

	void add_tune_flags(CLI::App *app, Common &c)
	{
		app->add_option("--tune-epochs", c.tune_epochs, "Fine-tuning epochs");
		app->add_option("--tune-lr", c.tune_lr, "Fine-tuning learning rate");
	}

	RegConfig reg_config(const Common &c)
	{
		RegConfig r;
		r.kind = parse_reg_kind(c.reg);
		r.K = c.k;
		r.w_min = c.wmin;
		r.w_max = c.wmax;
		r.lambda = c.lambda;
		r.layer_group = parse_layer_group(c.layers);
		r.codebook_mode = parse_codebook_mode(c.codebook);
		return r;
	}

	int cmd_train(const Common &c, const std::string &resume)
	{
		const RegConfig reg = reg_config(c);
		reg.validate();
		const CifarSplits data = load_cifar10(c.data, c.train_size, c.test_size);
		fs::create_directories(c.out);
		const fs::path ckpt_path = fs::path(c.out) / "checkpoint.bin";

		Checkpoint ck;
		if (!resume.empty())
		{
			ck = load_checkpoint(resume);
			if (ck.epochs_done > c.epochs)
				throw ConfigError("checkpoint already holds " + std::to_string(ck.epochs_done) + " epochs");
			std::cout << "resuming from epoch " << ck.epochs_done << '\n';
		}
		else
		{
			ck.seed = c.seeds.front();
			ck.config = reg;
			ck.model = build_model( { cifar::channels, cifar::side, cifar::side }, c.arch);
			Rng rng(mix_seed(ck.seed, 0x1417));
			initialize(ck.model, rng);
			ck.optimizer = OptimizerState { c.lr, c.momentum };
			if (reg.kind != RegKind::None)
				ck.codebooks = init_codebooks(ck.model, reg);
		}

		std::ofstream log(fs::path(c.out) / "train_log.csv", resume.empty() ? std::ios::trunc : std::ios::app);
		if (resume.empty())
			log << "epoch,task_loss,reg_value,total_objective,train_accuracy,test_accuracy\n";
		for (std::size_t e = ck.epochs_done; e < c.epochs; e++)
		{
			TrainOptions opts;
			opts.batch_size = c.batch;
			opts.start_epoch = e;
			TrainReport rep = train(std::move(ck.model), data.train, ck.config, ck.optimizer, e + 1, ck.seed, opts, ck.codebooks);
			ck.model = std::move(rep.model);
			ck.codebooks = std::move(rep.codebooks);
			ck.optimizer = std::move(rep.optimizer);
			ck.epochs_done = e + 1;
			save_checkpoint(ck, ckpt_path);
			const auto &r = rep.records.back();
			const double test_acc = evaluate(ck.model, data.test);
			log << r.epoch << ',' << format_real(r.task_loss) << ',' << format_real(r.reg_value) << ',' << format_real(r.total_objective) << ','
					<< format_real(r.train_accuracy) << ',' << format_real(test_acc) << '\n';
			std::cout << "epoch " << r.epoch << " loss " << r.task_loss << " R " << r.reg_value << " train_acc " << r.train_accuracy << " test_acc "
					<< test_acc << std::endl;
		}
		std::cout << "checkpoint: " << ckpt_path.string() << '\n';
		return 0;
	}

	int cmd_quantize(const Common &c, const std::string &checkpoint, bool kmeans)
	{
		const Checkpoint ck = load_checkpoint(checkpoint);
		RegConfig reg = ck.config;
		if (reg.kind == RegKind::None || kmeans)
		{
			reg.K = c.k;
			reg.layer_group = parse_layer_group(c.layers);
		}
		QuantizedModel qm;
		if (reg.kind == RegKind::None || kmeans)
			qm = quantize_model(ck.model, reg, std::nullopt);
		else
		{
			const auto codes = quantization_codebooks(ck.model, reg, ck.codebooks);
			qm = quantize_model(ck.model, reg, std::span<const Codebook>(codes));
		}
		write_quantized_dump(qm, c.out);
		for (const auto &s : codebook_stats(qm))
			std::cout << "layer " << s.layer_index << ": " << s.distinct_values << " distinct values, entropy " << s.entropy_bits << " bits, index "
					<< s.index_bits << " bits\n";
		if (fs::exists(fs::path(c.data) / "test_batch.bin"))
		{
			const CifarSplits data = load_cifar10(c.data, 1, c.test_size);
			std::cout << "full-precision accuracy " << evaluate(ck.model, data.test) << ", quantized accuracy " << evaluate(qm, data.test) << '\n';
		}
		std::cout << "dump: " << c.out << '\n';
		return 0;
	}

	int cmd_tune(const Common &c, const std::string &checkpoint, const std::string &quantized)
	{
		const Checkpoint ck = load_checkpoint(checkpoint);
		const QuantizedModel qm = read_quantized_dump(ck.model, quantized);
		const CifarSplits data = load_cifar10(c.data, c.train_size, c.test_size);
		FinetuneOptions fo;
		fo.batch_size = c.batch;
		fo.seed = ck.seed;
		const double before = evaluate(qm, data.test);
		const QuantizedModel tuned = cumulative_finetune(qm, data.train, OptimizerState { c.tune_lr, c.momentum }, c.tune_epochs, fo);
		write_quantized_dump(tuned, c.out);
		std::cout << "accuracy before tuning " << before << ", after " << evaluate(tuned, data.test) << "\ndump: " << c.out << '\n';
		return 0;
	}

	int cmd_experiment(const Common &c, const std::vector<std::string> &regs)
	{
		ExperimentConfig cfg;
		cfg.data_dir = c.data;
		cfg.train_size = c.train_size;
		cfg.test_size = c.test_size;
		cfg.arch = c.arch;
		cfg.reg = reg_config(c);
		cfg.reg.kind = RegKind::None;
		cfg.kinds.clear();
		for (const auto &r : regs)
			cfg.kinds.push_back(parse_reg_kind(r));
		cfg.epochs = c.epochs;
		cfg.tune_epochs = c.tune_epochs;
		cfg.batch_size = c.batch;
		cfg.learning_rate = c.lr;
		cfg.momentum = c.momentum;
		cfg.tune_learning_rate = c.tune_lr;
		cfg.seeds = c.seeds;
		cfg.out_dir = c.out;
		const ExperimentResult res = run_experiment(cfg, &std::cout);
		for (const auto &p : emit_plots(res.rows, cfg.out_dir))
			std::cout << "wrote " << p.string() << '\n';
		std::cout << "metrics: " << res.metrics_csv.string() << '\n';
		return 0;
	}

}

int main(int argc, char **argv)
{
	CLI::App app { "Quantization-aware regularized training on CIFAR-10" };
	app.set_config("--config", "", "INI/TOML file providing option defaults");
	app.require_subcommand(1);
	Common c;

	auto *train_cmd = app.add_subcommand("train", "Train one network and write a checkpoint");
	add_reg_flags(train_cmd, c);
	add_data_flags(train_cmd, c);
	add_train_flags(train_cmd, c);
	train_cmd->add_option("--seeds", c.seeds, "Seed (first entry is used)")->delimiter(',');
	train_cmd->add_option("--out", c.out, "Output directory");
	std::string resume;
	train_cmd->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

	auto *quant_cmd = app.add_subcommand("quantize", "Quantize a checkpoint into centroids.csv + assignments.bin");
	std::string checkpoint;
	bool kmeans = false;
	quant_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
	quant_cmd->add_option("--k", c.k, "K for k-means clustering")->check(CLI::PositiveNumber);
	quant_cmd->add_option("--layers", c.layers, "Layers to cluster")->check(CLI::IsMember( { "conv", "dense", "all" }));
	quant_cmd->add_flag("--kmeans", kmeans, "Use k-means even for a regularized checkpoint");
	quant_cmd->add_option("--data", c.data, "CIFAR-10 directory, used for an accuracy report when present");
	quant_cmd->add_option("--test-size", c.test_size, "Test examples for the accuracy report");
	quant_cmd->add_option("--out", c.out, "Output directory");

	auto *tune_cmd = app.add_subcommand("tune", "Fine-tune the shared values of a quantized dump");
	std::string quantized;
	tune_cmd->add_option("--checkpoint", checkpoint, "Checkpoint the dump was made from")->required()->check(CLI::ExistingFile);
	tune_cmd->add_option("--quantized", quantized, "Directory with centroids.csv and assignments.bin")->required()->check(CLI::ExistingDirectory);
	add_data_flags(tune_cmd, c);
	add_tune_flags(tune_cmd, c);
	tune_cmd->add_option("--batch", c.batch, "Mini-batch size")->check(CLI::PositiveNumber);
	tune_cmd->add_option("--momentum", c.momentum, "SGD momentum");
	tune_cmd->add_option("--out", c.out, "Output directory");

	auto *exp_cmd = app.add_subcommand("experiment", "Paired baseline vs regularized runs over several seeds");
	std::vector<std::string> regs { "sine", "cos", "minl2", "exp" };
	add_reg_flags(exp_cmd, c);
	exp_cmd->remove_option(exp_cmd->get_option("--reg"));
	exp_cmd->add_option("--reg", regs, "Regularizers to compare against the baseline")->delimiter(',')->check(
			CLI::IsMember( { "sine", "cos", "minl2", "exp" }));
	add_data_flags(exp_cmd, c);
	add_train_flags(exp_cmd, c);
	add_tune_flags(exp_cmd, c);
	exp_cmd->add_option("--seeds", c.seeds, "Comma-separated seeds")->delimiter(',');
	exp_cmd->add_option("--out", c.out, "Output directory");

	auto *plot_cmd = app.add_subcommand("plots", "Render ratio plots from a metrics CSV");
	std::string metrics;
	plot_cmd->add_option("--metrics", metrics, "metrics.csv written by 'experiment'")->required()->check(CLI::ExistingFile);
	plot_cmd->add_option("--out", c.out, "Output directory");

	auto *synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset in the CIFAR-10 binary layout");
	std::size_t synth_train = 5000, synth_test = 1000;
	std::uint64_t synth_seed = 1;
	synth_cmd->add_option("--train-size", synth_train, "Training records (split over five batch files)");
	synth_cmd->add_option("--test-size", synth_test, "Test records");
	synth_cmd->add_option("--seed", synth_seed, "Generator seed");
	synth_cmd->add_option("--out", c.out, "Output directory");

	CLI11_PARSE(app, argc, argv);

	try
	{
		if (*train_cmd)
			return cmd_train(c, resume);
		if (*quant_cmd)
			return cmd_quantize(c, checkpoint, kmeans);
		if (*tune_cmd)
			return cmd_tune(c, checkpoint, quantized);
		if (*exp_cmd)
			return cmd_experiment(c, regs);
		if (*plot_cmd)
		{
			for (const auto &p : emit_plots(read_metrics_csv(metrics), c.out))
				std::cout << "wrote " << p.string() << '\n';
			return 0;
		}
		if (*synth_cmd)
		{
			write_synthetic_cifar_dir(c.out, synth_train, synth_test, synth_seed);
			std::cout << "synthetic data: " << c.out << '\n';
			return 0;
		}
	} catch (const ConfigError &e)
	{
		std::cerr << "configuration error: " << e.what() << '\n';
		return 2;
	} catch (const Error &e)
	{
		std::cerr << "error: " << e.what() << '\n';
		return 1;
	}
	return 0;
}
