/*
 * nn.hpp
 *
 * Minimal feed-forward engine: dense, conv2d ("same" padding, stride 1),
 * 2x2 max-pool, ReLU and a softmax/cross-entropy head, with analytic
 * backpropagation. All per-example activations are row-major; the leading
 * tensor dimension is always the batch.
 */

#ifndef QAREG_NN_HPP_
#define QAREG_NN_HPP_

#include <qareg/tensor.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qareg
{

	enum class LayerKind
	{
		Dense,
		Conv2D,
		MaxPool,
		ReLU,
		SoftmaxCE
	};

	inline std::string to_string(LayerKind kind)
	{
		switch (kind)
		{
			case LayerKind::Dense:
				return "Dense";
			case LayerKind::Conv2D:
				return "Conv2D";
			case LayerKind::MaxPool:
				return "MaxPool";
			case LayerKind::ReLU:
				return "ReLU";
			case LayerKind::SoftmaxCE:
				return "SoftmaxCE";
		}
		return "?";
	}

	/*
	 * One layer. Weight layouts:
	 *   Dense  - [fan_in, fan_out], i.e. d_{l-1} x d_l
	 *   Conv2D - [out_channels, in_channels, k, k]
	 * Parameter-free kinds keep empty weight tensors and fan_in == fan_out ==
	 * per-example feature count.
	 */
	struct LayerParams
	{
			LayerKind kind = LayerKind::ReLU;
			Tensor weights;
			std::optional<Tensor> bias;
			Tensor grad_weights;
			Tensor grad_bias;
			std::size_t fan_in = 1;
			std::size_t fan_out = 1;
			Shape in_shape;
			Shape out_shape;
			std::size_t kernel = 0;

			bool parameterized() const noexcept
			{
				return kind == LayerKind::Dense || kind == LayerKind::Conv2D;
			}
			std::size_t in_features() const noexcept
			{
				return shape_volume(in_shape);
			}
			std::size_t out_features() const noexcept
			{
				return shape_volume(out_shape);
			}
			void zero_grad()
			{
				grad_weights.fill(0.0);
				grad_bias.fill(0.0);
			}
	};

	struct Model
	{
			Shape input_shape;
			std::vector<LayerParams> layers;

			std::size_t L() const noexcept
			{
				return layers.size();
			}
			std::size_t num_classes() const
			{
				if (layers.empty())
					throw MisuseError("model has no layers");
				return layers.back().out_features();
			}
			std::size_t parameter_count() const noexcept
			{
				std::size_t n = 0;
				for (const auto &l : layers)
					n += l.weights.size() + (l.bias ? l.bias->size() : 0);
				return n;
			}
			void zero_grad()
			{
				for (auto &l : layers)
					l.zero_grad();
			}
	};

	inline LayerParams make_dense(std::size_t in, std::size_t out, bool with_bias = true)
	{
		if (in == 0 || out == 0)
			throw ConfigError("dense layer needs positive fan-in and fan-out");
		LayerParams l;
		l.kind = LayerKind::Dense;
		l.weights = Tensor( { in, out });
		l.grad_weights = Tensor( { in, out });
		if (with_bias)
		{
			l.bias = Tensor( { out });
			l.grad_bias = Tensor( { out });
		}
		l.fan_in = in;
		l.fan_out = out;
		l.in_shape = { in };
		l.out_shape = { out };
		return l;
	}

	inline LayerParams make_conv2d(const Shape &in_chw, std::size_t out_channels, std::size_t kernel = 3, bool with_bias = true)
	{
		if (in_chw.size() != 3)
			throw DimensionError("conv2d expects a [C,H,W] input, got " + shape_to_string(in_chw));
		if (kernel % 2 == 0 || out_channels == 0)
			throw ConfigError("conv2d needs an odd kernel and at least one output channel");
		LayerParams l;
		l.kind = LayerKind::Conv2D;
		l.kernel = kernel;
		l.weights = Tensor( { out_channels, in_chw[0], kernel, kernel });
		l.grad_weights = Tensor(l.weights.shape);
		if (with_bias)
		{
			l.bias = Tensor( { out_channels });
			l.grad_bias = Tensor( { out_channels });
		}
		l.fan_in = in_chw[0] * kernel * kernel;
		l.fan_out = out_channels;
		l.in_shape = in_chw;
		l.out_shape = { out_channels, in_chw[1], in_chw[2] };
		return l;
	}

	inline LayerParams make_maxpool(const Shape &in_chw)
	{
		if (in_chw.size() != 3 || in_chw[1] % 2 != 0 || in_chw[2] % 2 != 0)
			throw DimensionError("2x2 max-pool expects [C,H,W] with even H and W, got " + shape_to_string(in_chw));
		LayerParams l;
		l.kind = LayerKind::MaxPool;
		l.in_shape = in_chw;
		l.out_shape = { in_chw[0], in_chw[1] / 2, in_chw[2] / 2 };
		l.fan_in = l.in_features();
		l.fan_out = l.out_features();
		return l;
	}

	inline LayerParams make_relu(const Shape &shape)
	{
		LayerParams l;
		l.kind = LayerKind::ReLU;
		l.in_shape = shape;
		l.out_shape = shape;
		l.fan_in = l.fan_out = shape_volume(shape);
		return l;
	}

	inline LayerParams make_softmax_ce(std::size_t classes)
	{
		LayerParams l;
		l.kind = LayerKind::SoftmaxCE;
		l.in_shape = { classes };
		l.out_shape = { classes };
		l.fan_in = l.fan_out = classes;
		return l;
	}

	/// Glorot-style uniform init in [-r, r], r = sqrt(6 / (fan_in + fan_out)); biases start at zero.
	inline void initialize(Model &model, Rng &rng)
	{
		for (auto &l : model.layers)
		{
			if (!l.parameterized())
				continue;
			const double r = std::sqrt(6.0 / static_cast<double>(l.fan_in + l.fan_out));
			for (double &w : l.weights.data)
				w = rng.uniform(-r, r);
			if (l.bias)
				l.bias->fill(0.0);
			l.zero_grad();
		}
	}

	/*
	 * Builds a model from a comma-separated layer list, e.g.
	 *   "conv:16,pool,conv:32,pool,dense:128,dense:10"
	 * "conv:N[:k]" and "dense:N" are followed by an implicit ReLU except for
	 * the final dense layer; a softmax/cross-entropy head is always appended.
	 */
	inline Model build_model(const Shape &input_shape, std::string_view arch)
	{
		Model m;
		m.input_shape = input_shape;
		Shape cur = input_shape;

		std::vector<std::string> tokens;
		std::string tok;
		for (char c : arch)
		{
			if (c == ',')
			{
				tokens.push_back(tok);
				tok.clear();
			}
			else if (c != ' ')
				tok.push_back(c);
		}
		if (!tok.empty())
			tokens.push_back(tok);
		if (tokens.empty())
			throw ConfigError("empty architecture description");

		auto parse_count = [](const std::string &s) -> std::size_t {
			try
			{
				std::size_t pos = 0;
				const long v = std::stol(s, &pos);
				if (pos != s.size() || v <= 0)
					throw ConfigError("bad layer size '" + s + "'");
				return static_cast<std::size_t>(v);
			} catch (const std::logic_error&)
			{
				throw ConfigError("bad layer size '" + s + "'");
			}
		};

		for (std::size_t i = 0; i < tokens.size(); i++)
		{
			const std::string &t = tokens[i];
			const bool last = (i + 1 == tokens.size());
			std::vector<std::string> parts;
			std::size_t start = 0;
			for (std::size_t p = 0; p <= t.size(); p++)
				if (p == t.size() || t[p] == ':')
				{
					parts.push_back(t.substr(start, p - start));
					start = p + 1;
				}
			const std::string &name = parts[0];
			if (name == "conv")
			{
				if (parts.size() < 2 || parts.size() > 3)
					throw ConfigError("conv layer spec must be conv:N or conv:N:k, got '" + t + "'");
				const std::size_t k = parts.size() == 3 ? parse_count(parts[2]) : 3;
				m.layers.push_back(make_conv2d(cur, parse_count(parts[1]), k));
				cur = m.layers.back().out_shape;
				m.layers.push_back(make_relu(cur));
			}
			else if (name == "pool")
			{
				m.layers.push_back(make_maxpool(cur));
				cur = m.layers.back().out_shape;
			}
			else if (name == "dense")
			{
				if (parts.size() != 2)
					throw ConfigError("dense layer spec must be dense:N, got '" + t + "'");
				m.layers.push_back(make_dense(shape_volume(cur), parse_count(parts[1])));
				cur = m.layers.back().out_shape;
				if (!last)
					m.layers.push_back(make_relu(cur));
			}
			else
				throw ConfigError("unknown layer '" + t + "'");
		}
		if (m.layers.back().kind != LayerKind::Dense)
			throw ConfigError("architecture must end with a dense layer");
		m.layers.push_back(make_softmax_ce(shape_volume(cur)));
		return m;
	}

	namespace detail
	{
		using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
		using MatMap = Eigen::Map<RowMat>;
		using ConstMatMap = Eigen::Map<const RowMat>;
		using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
		using VecMap = Eigen::Map<Eigen::VectorXd>;

		/// col is [C*k*k, H*W]; zero padding of k/2 on each side.
		inline void im2col(const double *img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, double *col)
		{
			const long pad = static_cast<long>(k / 2);
			const std::size_t HW = H * W;
			for (std::size_t c = 0; c < C; c++)
				for (std::size_t ky = 0; ky < k; ky++)
					for (std::size_t kx = 0; kx < k; kx++)
					{
						double *row = col + ((c * k + ky) * k + kx) * HW;
						const double *plane = img + c * HW;
						for (std::size_t y = 0; y < H; y++)
						{
							const long iy = static_cast<long>(y + ky) - pad;
							double *dst = row + y * W;
							if (iy < 0 || iy >= static_cast<long>(H))
							{
								std::fill(dst, dst + W, 0.0);
								continue;
							}
							for (std::size_t x = 0; x < W; x++)
							{
								const long ix = static_cast<long>(x + kx) - pad;
								dst[x] = (ix < 0 || ix >= static_cast<long>(W)) ? 0.0 : plane[iy * static_cast<long>(W) + ix];
							}
						}
					}
		}

		inline void col2im_add(const double *col, std::size_t C, std::size_t H, std::size_t W, std::size_t k, double *img)
		{
			const long pad = static_cast<long>(k / 2);
			const std::size_t HW = H * W;
			for (std::size_t c = 0; c < C; c++)
				for (std::size_t ky = 0; ky < k; ky++)
					for (std::size_t kx = 0; kx < k; kx++)
					{
						const double *row = col + ((c * k + ky) * k + kx) * HW;
						double *plane = img + c * HW;
						for (std::size_t y = 0; y < H; y++)
						{
							const long iy = static_cast<long>(y + ky) - pad;
							if (iy < 0 || iy >= static_cast<long>(H))
								continue;
							for (std::size_t x = 0; x < W; x++)
							{
								const long ix = static_cast<long>(x + kx) - pad;
								if (ix >= 0 && ix < static_cast<long>(W))
									plane[iy * static_cast<long>(W) + ix] += row[y * W + x];
							}
						}
					}
		}

		inline Tensor batch_tensor(std::size_t batch, const Shape &per_example)
		{
			Shape s { batch };
			s.insert(s.end(), per_example.begin(), per_example.end());
			return Tensor(std::move(s));
		}

		inline Tensor layer_forward(const LayerParams &l, const Tensor &in)
		{
			const std::size_t N = in.dim(0);
			Tensor out = batch_tensor(N, l.out_shape);
			switch (l.kind)
			{
				case LayerKind::Dense:
				{
					ConstMatMap X(in.data.data(), N, l.fan_in);
					ConstMatMap Wt(l.weights.data.data(), l.fan_in, l.fan_out);
					MatMap Y(out.data.data(), N, l.fan_out);
					Y.noalias() = X * Wt;
					if (l.bias)
						Y.rowwise() += ConstVecMap(l.bias->data.data(), l.fan_out).transpose();
					break;
				}
				case LayerKind::Conv2D:
				{
					const std::size_t C = l.in_shape[0], H = l.in_shape[1], W = l.in_shape[2];
					const std::size_t OC = l.out_shape[0], HW = H * W, CKK = l.fan_in;
					ConstMatMap Wm(l.weights.data.data(), OC, CKK);
					RowMat col(CKK, HW);
					for (std::size_t n = 0; n < N; n++)
					{
						im2col(in.data.data() + n * C * HW, C, H, W, l.kernel, col.data());
						MatMap Y(out.data.data() + n * OC * HW, OC, HW);
						Y.noalias() = Wm * col;
						if (l.bias)
							Y.colwise() += ConstVecMap(l.bias->data.data(), OC);
					}
					break;
				}
				case LayerKind::MaxPool:
				{
					const std::size_t C = l.in_shape[0], H = l.in_shape[1], W = l.in_shape[2];
					const std::size_t OH = H / 2, OW = W / 2;
					for (std::size_t nc = 0; nc < N * C; nc++)
					{
						const double *src = in.data.data() + nc * H * W;
						double *dst = out.data.data() + nc * OH * OW;
						for (std::size_t y = 0; y < OH; y++)
							for (std::size_t x = 0; x < OW; x++)
							{
								const double *p = src + 2 * y * W + 2 * x;
								dst[y * OW + x] = std::max(std::max(p[0], p[1]), std::max(p[W], p[W + 1]));
							}
					}
					break;
				}
				case LayerKind::ReLU:
					for (std::size_t i = 0; i < in.size(); i++)
						out[i] = in[i] > 0.0 ? in[i] : 0.0;
					break;
				case LayerKind::SoftmaxCE:
					out.data = in.data;
					break;
			}
			return out;
		}

		/// Returns dL/d(input); fills the layer's gradient buffers (overwriting them).
		inline Tensor layer_backward(LayerParams &l, const Tensor &in, const Tensor &grad_out)
		{
			const std::size_t N = in.dim(0);
			Tensor grad_in(in.shape);
			switch (l.kind)
			{
				case LayerKind::Dense:
				{
					ConstMatMap X(in.data.data(), N, l.fan_in);
					ConstMatMap G(grad_out.data.data(), N, l.fan_out);
					ConstMatMap Wt(l.weights.data.data(), l.fan_in, l.fan_out);
					MatMap(l.grad_weights.data.data(), l.fan_in, l.fan_out).noalias() = X.transpose() * G;
					if (l.bias)
						VecMap(l.grad_bias.data.data(), l.fan_out) = G.colwise().sum().transpose();
					MatMap(grad_in.data.data(), N, l.fan_in).noalias() = G * Wt.transpose();
					break;
				}
				case LayerKind::Conv2D:
				{
					const std::size_t C = l.in_shape[0], H = l.in_shape[1], W = l.in_shape[2];
					const std::size_t OC = l.out_shape[0], HW = H * W, CKK = l.fan_in;
					ConstMatMap Wm(l.weights.data.data(), OC, CKK);
					MatMap dW(l.grad_weights.data.data(), OC, CKK);
					dW.setZero();
					if (l.bias)
						l.grad_bias.fill(0.0);
					RowMat col(CKK, HW), dcol(CKK, HW);
					for (std::size_t n = 0; n < N; n++)
					{
						im2col(in.data.data() + n * C * HW, C, H, W, l.kernel, col.data());
						ConstMatMap G(grad_out.data.data() + n * OC * HW, OC, HW);
						dW.noalias() += G * col.transpose();
						if (l.bias)
							VecMap(l.grad_bias.data.data(), OC) += G.rowwise().sum();
						dcol.noalias() = Wm.transpose() * G;
						col2im_add(dcol.data(), C, H, W, l.kernel, grad_in.data.data() + n * C * HW);
					}
					break;
				}
				case LayerKind::MaxPool:
				{
					const std::size_t C = l.in_shape[0], H = l.in_shape[1], W = l.in_shape[2];
					const std::size_t OH = H / 2, OW = W / 2;
					for (std::size_t nc = 0; nc < N * C; nc++)
					{
						const double *src = in.data.data() + nc * H * W;
						double *dsrc = grad_in.data.data() + nc * H * W;
						const double *g = grad_out.data.data() + nc * OH * OW;
						for (std::size_t y = 0; y < OH; y++)
							for (std::size_t x = 0; x < OW; x++)
							{
								// first maximum in scan order takes the whole gradient
								const std::size_t base = 2 * y * W + 2 * x;
								const std::size_t cand[4] = { base, base + 1, base + W, base + W + 1 };
								std::size_t best = cand[0];
								for (std::size_t c : cand)
									if (src[c] > src[best])
										best = c;
								dsrc[best] += g[y * OW + x];
							}
					}
					break;
				}
				case LayerKind::ReLU:
					for (std::size_t i = 0; i < in.size(); i++)
						grad_in[i] = in[i] > 0.0 ? grad_out[i] : 0.0;
					break;
				case LayerKind::SoftmaxCE:
					grad_in.data = grad_out.data;
					break;
			}
			return grad_in;
		}

		inline void check_batch(const Model &model, const Tensor &batch)
		{
			if (model.layers.empty())
				throw MisuseError("model has no layers");
			if (batch.rank() == 0 || batch.dim(0) == 0)
				throw InputError("empty batch");
			Shape per_example(batch.shape.begin() + 1, batch.shape.end());
			if (per_example != model.input_shape)
				throw DimensionError("layer 0 (" + to_string(model.layers[0].kind) + "): expected per-example input " + shape_to_string(model.input_shape)
						+ ", got " + shape_to_string(per_example));
			for (std::size_t i = 0; i + 1 < model.layers.size(); i++)
				if (model.layers[i].out_features() != model.layers[i + 1].in_features())
					throw DimensionError("layer " + std::to_string(i + 1) + " (" + to_string(model.layers[i + 1].kind) + "): expects "
							+ std::to_string(model.layers[i + 1].in_features()) + " inputs but layer " + std::to_string(i) + " produces "
							+ std::to_string(model.layers[i].out_features()));
			if (shape_volume(model.input_shape) != model.layers[0].in_features())
				throw DimensionError("layer 0 (" + to_string(model.layers[0].kind) + "): expects " + std::to_string(model.layers[0].in_features())
						+ " inputs, model input has " + std::to_string(shape_volume(model.input_shape)));
		}

		/// Per-example max-shifted log-sum-exp of a logit row.
		inline double log_sum_exp(const double *row, std::size_t n)
		{
			const double m = *std::max_element(row, row + n);
			double s = 0.0;
			for (std::size_t j = 0; j < n; j++)
				s += std::exp(row[j] - m);
			return m + std::log(s);
		}

		inline std::vector<std::size_t> checked_labels(std::span<const double> labels, std::size_t batch, std::size_t classes)
		{
			if (labels.size() != batch)
				throw InputError("expected " + std::to_string(batch) + " labels, got " + std::to_string(labels.size()));
			std::vector<std::size_t> out(batch);
			for (std::size_t i = 0; i < batch; i++)
			{
				const double y = labels[i];
				if (!(y >= 0.0) || y >= static_cast<double>(classes) || y != std::floor(y))
					throw InputError("label " + std::to_string(y) + " at position " + std::to_string(i) + " is not a class index in [0, "
							+ std::to_string(classes) + ")");
				out[i] = static_cast<std::size_t>(y);
			}
			return out;
		}
	} /* namespace detail */

	/// Pre-softmax class scores, shape [batch, d_L].
	inline Tensor forward(const Model &model, const Tensor &batch)
	{
		detail::check_batch(model, batch);
		Tensor act = batch;
		for (const auto &l : model.layers)
			act = detail::layer_forward(l, act);
		return act;
	}

	/*
	 * Mean softmax cross-entropy over the batch. Overwrites grad_weights and
	 * grad_bias of every parameterized layer with the task-loss gradient.
	 * Optionally hands back the logits of the forward pass.
	 */
	inline double loss_and_grad(Model &model, const Tensor &batch, std::span<const double> labels, Tensor *logits_out = nullptr)
	{
		detail::check_batch(model, batch);
		const std::size_t N = batch.dim(0);
		const std::size_t classes = model.num_classes();
		const auto y = detail::checked_labels(labels, N, classes);

		std::vector<Tensor> acts;
		acts.reserve(model.layers.size() + 1);
		acts.push_back(batch);
		for (const auto &l : model.layers)
			acts.push_back(detail::layer_forward(l, acts.back()));

		const Tensor &logits = acts.back();
		Tensor grad(logits.shape);
		double loss = 0.0;
		const double inv_n = 1.0 / static_cast<double>(N);
		for (std::size_t n = 0; n < N; n++)
		{
			const double *row = logits.data.data() + n * classes;
			const double lse = detail::log_sum_exp(row, classes);
			loss += lse - row[y[n]];
			double *g = grad.data.data() + n * classes;
			for (std::size_t j = 0; j < classes; j++)
				g[j] = std::exp(row[j] - lse) * inv_n;
			g[y[n]] -= inv_n;
		}

		for (std::size_t i = model.layers.size(); i-- > 0;)
			grad = detail::layer_backward(model.layers[i], acts[i], grad);
		if (logits_out)
			*logits_out = std::move(acts.back());
		return loss * inv_n;
	}

	inline double loss_and_grad(Model &model, const Tensor &batch, const Tensor &labels)
	{
		return loss_and_grad(model, batch, labels.values());
	}

	/// Mean cross-entropy without touching gradient buffers.
	inline double loss_only(const Model &model, const Tensor &batch, std::span<const double> labels)
	{
		const Tensor logits = forward(model, batch);
		const std::size_t N = batch.dim(0), classes = model.num_classes();
		const auto y = detail::checked_labels(labels, N, classes);
		double loss = 0.0;
		for (std::size_t n = 0; n < N; n++)
		{
			const double *row = logits.data.data() + n * classes;
			loss += detail::log_sum_exp(row, classes) - row[y[n]];
		}
		return loss / static_cast<double>(N);
	}

	/// Row-wise argmax of a [N, classes] score tensor (first maximum on ties).
	inline std::vector<std::size_t> argmax_rows(const Tensor &scores)
	{
		const std::size_t N = scores.dim(0), classes = scores.size() / N;
		std::vector<std::size_t> out(N);
		for (std::size_t n = 0; n < N; n++)
		{
			const double *row = scores.data.data() + n * classes;
			out[n] = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
		}
		return out;
	}

} /* namespace qareg */

#endif /* QAREG_NN_HPP_ */
