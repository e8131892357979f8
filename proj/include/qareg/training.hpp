/*
 * training.hpp
 *
 * Mini-batch momentum SGD on  task loss + lambda * R(W), with the learnable
 * representatives stepped together with the weights, and the centroid-only
 * fine-tuning that follows weight sharing.
 */

#ifndef QAREG_TRAINING_HPP_
#define QAREG_TRAINING_HPP_

#include <qareg/cifar.hpp>
#include <qareg/nn.hpp>
#include <qareg/quantizer.hpp>
#include <qareg/regularizers.hpp>
#include <qareg/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace qareg
{

	/*
	 * Momentum SGD: v <- momentum * v + g, p <- p - lr * v. Velocity buffers
	 * are allocated lazily to mirror the parameters they belong to.
	 */
	struct OptimizerState
	{
			double learning_rate = 0.01;
			double momentum = 0.9;
			std::size_t decay_every = 0;  // epochs between step decays, 0 = constant rate
			double decay_factor = 0.1;

			std::vector<std::vector<double>> weight_velocity;
			std::vector<std::vector<double>> bias_velocity;
			std::vector<std::vector<double>> codebook_velocity;
			std::vector<std::vector<double>> centroid_velocity;

			void validate() const
			{
				if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
					throw ConfigError("learning rate must be positive");
				if (!(momentum >= 0.0 && momentum < 1.0))
					throw ConfigError("momentum must lie in [0, 1)");
			}

			double rate_at(std::size_t epoch) const
			{
				if (decay_every == 0)
					return learning_rate;
				return learning_rate * std::pow(decay_factor, static_cast<double>(epoch / decay_every));
			}

			void reset_velocity()
			{
				weight_velocity.clear();
				bias_velocity.clear();
				codebook_velocity.clear();
				centroid_velocity.clear();
			}

			/// Applies one step to `param` using (and growing if needed) `velocity`.
			void step(std::span<double> param, std::span<const double> grad, std::vector<double> &velocity, double lr) const
			{
				if (velocity.size() != param.size())
					velocity.assign(param.size(), 0.0);
				for (std::size_t i = 0; i < param.size(); i++)
				{
					velocity[i] = momentum * velocity[i] + grad[i];
					param[i] -= lr * velocity[i];
				}
			}

			friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
	};

	struct TrainRecord
	{
			std::size_t epoch = 0;
			double task_loss = 0.0;
			double reg_value = 0.0;
			double total_objective = 0.0;
			double train_accuracy = 0.0;
	};

	struct TrainReport
	{
			std::vector<TrainRecord> records;
			Model model;
			std::vector<Codebook> codebooks;
			OptimizerState optimizer;
	};

	struct TrainOptions
	{
			std::size_t batch_size = 32;
			/// Epoch to resume from (epochs before it are assumed done).
			std::size_t start_epoch = 0;
			/// Keep u fixed (gradients are still computed).
			bool freeze_codebooks = false;
			/// Invoked after every optimizer step with (epoch, batch).
			std::function<void(std::size_t, std::size_t)> on_step;
	};

	/// Copies the listed examples into a contiguous batch.
	inline std::pair<Tensor, std::vector<double>> gather_batch(const Dataset &data, std::span<const std::size_t> indices)
	{
		const std::size_t per = data.images.size() / data.size();
		Shape s = data.images.shape;
		s[0] = indices.size();
		Tensor x(std::move(s));
		std::vector<double> y(indices.size());
		for (std::size_t b = 0; b < indices.size(); b++)
		{
			std::copy_n(data.images.data.begin() + static_cast<std::ptrdiff_t>(indices[b] * per), per, x.data.begin() + static_cast<std::ptrdiff_t>(b * per));
			y[b] = data.labels[indices[b]];
		}
		return { std::move(x), std::move(y) };
	}

	/// Example order for one epoch; depends only on (seed, epoch).
	inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch)
	{
		std::vector<std::size_t> order(n);
		std::iota(order.begin(), order.end(), std::size_t { 0 });
		Rng rng(mix_seed(seed, 0x5af0ULL + epoch));
		rng.shuffle(order);
		return order;
	}

	inline std::size_t count_correct(const Tensor &logits, std::span<const double> labels)
	{
		const auto pred = argmax_rows(logits);
		std::size_t c = 0;
		for (std::size_t i = 0; i < pred.size(); i++)
			c += (static_cast<double>(pred[i]) == labels[i]);
		return c;
	}

	/// Fraction of argmax-correct predictions.
	inline double evaluate(const Model &model, const Dataset &data, std::size_t batch_size = 250)
	{
		if (data.size() == 0)
			throw InputError("cannot evaluate on an empty dataset");
		std::size_t correct = 0;
		std::vector<std::size_t> idx;
		for (std::size_t start = 0; start < data.size(); start += batch_size)
		{
			const std::size_t end = std::min(data.size(), start + batch_size);
			idx.resize(end - start);
			std::iota(idx.begin(), idx.end(), start);
			const auto [x, y] = gather_batch(data, idx);
			correct += count_correct(forward(model, x), y);
		}
		return static_cast<double>(correct) / static_cast<double>(data.size());
	}

	inline double evaluate(const QuantizedModel &qm, const Dataset &data, std::size_t batch_size = 250)
	{
		return evaluate(qm.base, data, batch_size);
	}

	namespace detail
	{
		inline void sgd_step_layers(Model &model, OptimizerState &opt, double lr, const std::vector<bool> *trainable_weights = nullptr, bool biases = true)
		{
			opt.weight_velocity.resize(model.layers.size());
			opt.bias_velocity.resize(model.layers.size());
			for (std::size_t i = 0; i < model.layers.size(); i++)
			{
				LayerParams &l = model.layers[i];
				if (!l.parameterized())
					continue;
				if (!trainable_weights || (*trainable_weights)[i])
					opt.step(l.weights.values(), l.grad_weights.values(), opt.weight_velocity[i], lr);
				if (l.bias && biases)
					opt.step(l.bias->values(), l.grad_bias.values(), opt.bias_velocity[i], lr);
			}
		}
	}

	/// One momentum-SGD step over every weight, bias and (unless frozen) codebook.
	inline void sgd_step(Model &model, std::span<Codebook> codebooks, OptimizerState &opt, double lr, bool freeze_codebooks = false)
	{
		detail::sgd_step_layers(model, opt, lr);
		if (freeze_codebooks)
			return;
		opt.codebook_velocity.resize(codebooks.size());
		for (std::size_t j = 0; j < codebooks.size(); j++)
			opt.step(codebooks[j].u, codebooks[j].grad_u, opt.codebook_velocity[j], lr);
	}

	/*
	 * Minimizes  task loss + lambda * R(W)  for `epochs` epochs. Dynamic
	 * regularizers start from init_codebooks() unless codebooks are given.
	 * Batch order is drawn from (seed, epoch) only, so two runs sharing a
	 * seed see identical batches whatever their RegConfig.
	 */
	inline TrainReport train(Model model, const Dataset &data, const RegConfig &config, OptimizerState opt, std::size_t epochs, std::uint64_t seed,
			const TrainOptions &options = { }, std::vector<Codebook> codebooks = { })
	{
		config.validate();
		opt.validate();
		if (data.size() == 0)
			throw InputError("training set is empty");
		if (options.batch_size == 0)
			throw ConfigError("batch size must be positive");
		const bool regularized = config.kind != RegKind::None;
		if (regularized)
		{
			require_selected_layers(model, config.layer_group);
			if (codebooks.empty())
				codebooks = init_codebooks(model, config);
			detail::check_codebooks(model, config, codebooks.size());
		}

		TrainReport report;
		for (std::size_t epoch = options.start_epoch; epoch < epochs; epoch++)
		{
			const auto order = epoch_order(data.size(), seed, epoch);
			const double lr = opt.rate_at(epoch);
			double task_sum = 0.0, reg_sum = 0.0, total_sum = 0.0;
			std::size_t correct = 0, batches = 0;
			Tensor logits;
			for (std::size_t start = 0, b = 0; start < order.size(); start += options.batch_size, b++)
			{
				const std::size_t end = std::min(order.size(), start + options.batch_size);
				const auto [x, y] = gather_batch(data, std::span(order).subspan(start, end - start));
				const double task = loss_and_grad(model, x, y, &logits);
				double reg = 0.0;
				if (regularized)
				{
					for (auto &cb : codebooks)
						cb.grad_u.assign(cb.u.size(), 0.0);
					reg = reg_value_and_grads(model, config, codebooks);
				}
				const double total = task + config.lambda * reg;
				if (!std::isfinite(total))
					throw DivergenceError("non-finite objective (task " + format_real(task) + ", R " + format_real(reg) + ") at epoch " + std::to_string(epoch)
							+ ", batch " + std::to_string(b));
				sgd_step(model, codebooks, opt, lr, options.freeze_codebooks);
				if (options.on_step)
					options.on_step(epoch, b);

				task_sum += task;
				reg_sum += reg;
				total_sum += total;
				correct += count_correct(logits, y);
				batches++;
			}
			TrainRecord rec;
			rec.epoch = epoch;
			rec.task_loss = task_sum / static_cast<double>(batches);
			rec.reg_value = reg_sum / static_cast<double>(batches);
			rec.total_objective = total_sum / static_cast<double>(batches);
			rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
			report.records.push_back(rec);
		}
		report.model = std::move(model);
		report.codebooks = std::move(codebooks);
		report.optimizer = std::move(opt);
		return report;
	}

	struct FinetuneOptions
	{
			std::size_t batch_size = 32;
			std::uint64_t seed = 0;
			/// Also step full-precision layers and all biases (frozen by default).
			bool train_unquantized = false;
			/// Keep lambda * R(W) in the objective during tuning, with u held fixed.
			bool keep_regularizer = false;
			RegConfig regularizer;
			std::vector<Codebook> codebooks;
			std::function<void(const QuantizedModel&, std::size_t, std::size_t)> on_step;
	};

	/// Sum of per-entry gradients over each cluster: d loss / d centroid_j.
	inline std::vector<double> centroid_gradients(const ClusterAssignment &a, std::span<const double> grad_weights)
	{
		std::vector<double> g(a.centroids.size(), 0.0);
		for (std::size_t i = 0; i < a.assignment.size(); i++)
			g[a.assignment[i]] += grad_weights[i];
		return g;
	}

	/*
	 * Weight-sharing fine-tuning: only centroids move. Each centroid receives
	 * the summed gradient of its member weights, takes an optimizer step, and
	 * every member weight is rewritten to the new centroid. Assignments never
	 * change.
	 */
	inline QuantizedModel cumulative_finetune(QuantizedModel qm, const Dataset &data, OptimizerState opt, std::size_t epochs, const FinetuneOptions &options = { })
	{
		opt.validate();
		if (data.size() == 0)
			throw InputError("tuning set is empty");
		if (options.batch_size == 0)
			throw ConfigError("batch size must be positive");
		std::vector<Codebook> codebooks = options.codebooks;
		if (options.keep_regularizer)
		{
			options.regularizer.validate();
			detail::check_codebooks(qm.base, options.regularizer, codebooks.size());
		}
		std::vector<bool> untouched(qm.base.layers.size(), false);
		for (auto i : qm.untouched_layers)
			untouched[i] = true;
		opt.centroid_velocity.resize(qm.assignments.size());

		for (std::size_t epoch = 0; epoch < epochs; epoch++)
		{
			const auto order = epoch_order(data.size(), options.seed, epoch);
			const double lr = opt.rate_at(epoch);
			for (std::size_t start = 0, b = 0; start < order.size(); start += options.batch_size, b++)
			{
				const std::size_t end = std::min(order.size(), start + options.batch_size);
				const auto [x, y] = gather_batch(data, std::span(order).subspan(start, end - start));
				const double task = loss_and_grad(qm.base, x, y);
				double total = task;
				if (options.keep_regularizer)
					total += options.regularizer.lambda * reg_value_and_grads(qm.base, options.regularizer, codebooks);
				if (!std::isfinite(total))
					throw DivergenceError("non-finite objective during tuning at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));

				for (std::size_t k = 0; k < qm.assignments.size(); k++)
				{
					ClusterAssignment &a = qm.assignments[k];
					LayerParams &layer = qm.base.layers[a.layer_index];
					const auto g = centroid_gradients(a, layer.grad_weights.values());
					opt.step(a.centroids, g, opt.centroid_velocity[k], lr);
					write_shared_weights(layer, a);
				}
				if (options.train_unquantized)
					detail::sgd_step_layers(qm.base, opt, lr, &untouched, true);
				if (options.on_step)
					options.on_step(qm, epoch, b);
			}
		}
		return qm;
	}

} /* namespace qareg */

#endif /* QAREG_TRAINING_HPP_ */
