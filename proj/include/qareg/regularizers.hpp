/*
 * regularizers.hpp
 *
 * Quantization-aware weight penalties. Static kinds (Sine, Cosine) place K
 * evenly spaced minima in [w_min, w_max]; dynamic kinds (MinL2, Exp) attract
 * weights to K learnable representatives u that are trained alongside the
 * weights.
 *
 * The aggregate over a model is
 *
 *     R(W) = sum over selected layers l of ( sum_i rho(w_i^(l)) ) / n_l
 *
 * where n_l is the number of weight entries of layer l (d_{l-1} * d_l for a
 * dense layer, the full kernel-entry count for a convolution). Biases are
 * never regularized.
 */

#ifndef QAREG_REGULARIZERS_HPP_
#define QAREG_REGULARIZERS_HPP_

#include <qareg/nn.hpp>
#include <qareg/tensor.hpp>

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qareg
{

	enum class RegKind
	{
		None,
		Sine,
		Cosine,
		MinL2,
		Exp
	};

	enum class LayerGroup
	{
		ConvOnly,
		DenseOnly,
		All
	};

	enum class CodebookMode
	{
		PerLayer,
		Shared
	};

	inline std::string to_string(RegKind k)
	{
		switch (k)
		{
			case RegKind::None:
				return "none";
			case RegKind::Sine:
				return "sine";
			case RegKind::Cosine:
				return "cos";
			case RegKind::MinL2:
				return "minl2";
			case RegKind::Exp:
				return "exp";
		}
		return "?";
	}
	inline std::string to_string(LayerGroup g)
	{
		switch (g)
		{
			case LayerGroup::ConvOnly:
				return "conv";
			case LayerGroup::DenseOnly:
				return "dense";
			case LayerGroup::All:
				return "all";
		}
		return "?";
	}
	inline std::string to_string(CodebookMode m)
	{
		return m == CodebookMode::PerLayer ? "per-layer" : "shared";
	}

	inline RegKind parse_reg_kind(std::string_view s)
	{
		if (s == "none")
			return RegKind::None;
		if (s == "sine" || s == "sin")
			return RegKind::Sine;
		if (s == "cos" || s == "cosine")
			return RegKind::Cosine;
		if (s == "minl2")
			return RegKind::MinL2;
		if (s == "exp")
			return RegKind::Exp;
		throw ConfigError("unknown regularizer '" + std::string(s) + "' (expected none, sine, cos, minl2 or exp)");
	}
	inline LayerGroup parse_layer_group(std::string_view s)
	{
		if (s == "conv")
			return LayerGroup::ConvOnly;
		if (s == "dense")
			return LayerGroup::DenseOnly;
		if (s == "all")
			return LayerGroup::All;
		throw ConfigError("unknown layer group '" + std::string(s) + "' (expected conv, dense or all)");
	}
	inline CodebookMode parse_codebook_mode(std::string_view s)
	{
		if (s == "per-layer")
			return CodebookMode::PerLayer;
		if (s == "shared")
			return CodebookMode::Shared;
		throw ConfigError("unknown codebook mode '" + std::string(s) + "' (expected per-layer or shared)");
	}

	inline bool is_static(RegKind k) noexcept
	{
		return k == RegKind::Sine || k == RegKind::Cosine;
	}
	inline bool is_dynamic(RegKind k) noexcept
	{
		return k == RegKind::MinL2 || k == RegKind::Exp;
	}

	struct RegConfig
	{
			RegKind kind = RegKind::None;
			int K = 8;
			double w_min = -1.0;
			double w_max = 1.0;
			double lambda = 0.1;
			LayerGroup layer_group = LayerGroup::All;
			CodebookMode codebook_mode = CodebookMode::PerLayer;

			void validate() const
			{
				if (K < 2)
					throw ConfigError("K must be at least 2, got " + std::to_string(K));
				if (!(w_min < w_max))
					throw ConfigError("weight range requires w_min < w_max");
				if (kind != RegKind::None && !(lambda > 0.0))
					throw ConfigError("lambda must be positive for regularizer '" + to_string(kind) + "'");
				if (!(lambda >= 0.0) || !std::isfinite(lambda))
					throw ConfigError("lambda must be finite and non-negative");
			}
	};

	/// Learnable representatives u and their gradient buffer.
	struct Codebook
	{
			std::vector<double> u;
			std::vector<double> grad_u;

			Codebook() = default;
			explicit Codebook(std::vector<double> values) :
					u(std::move(values)),
					grad_u(u.size(), 0.0)
			{
			}
			std::size_t K() const noexcept
			{
				return u.size();
			}
			void zero_grad()
			{
				std::fill(grad_u.begin(), grad_u.end(), 0.0);
			}
			friend bool operator==(const Codebook&, const Codebook&) = default;
	};

	/// Penalty value at a weight plus the representative attaining it.
	struct NearestPenalty
	{
			double value;
			std::size_t index;
	};

	inline double rho_sine(double wbar, int K, double w, double W)
	{
		return std::abs(std::sin(M_PI * (K - 1) * (wbar - w) / (W - w)));
	}

	inline double rho_cosine(double wbar, int K, double w, double W)
	{
		return std::abs(std::cos(M_PI * K * (wbar - w) / (W - w)));
	}

	namespace detail
	{
		// |sin| or |cos| this small is a kink up to rounding of the phase
		inline constexpr double kink_tolerance = 1e-12;
	}

	/// d rho_S / d wbar; 0 at the kinks where the sine vanishes.

	inline double rho_sine_derivative(double wbar, int K, double w, double W)
	{
		const double a = M_PI * (K - 1) / (W - w);
		const double x = a * (wbar - w);
		const double s = std::sin(x);
		if (std::abs(s) <= detail::kink_tolerance)
			return 0.0;
		return (s > 0.0 ? 1.0 : -1.0) * std::cos(x) * a;
	}

	/// d rho_C / d wbar; 0 at the kinks where the cosine vanishes.
	inline double rho_cosine_derivative(double wbar, int K, double w, double W)
	{
		const double a = M_PI * K / (W - w);
		const double x = a * (wbar - w);
		const double c = std::cos(x);
		if (std::abs(c) <= detail::kink_tolerance)
			return 0.0;
		return -(c > 0.0 ? 1.0 : -1.0) * std::sin(x) * a;
	}

	namespace detail
	{
		inline void require_nonempty(std::span<const double> u)
		{
			if (u.empty())
				throw ConfigError("codebook is empty");
		}

		/// argmin_r (wbar - u_r)^2, lowest index on ties.
		inline NearestPenalty nearest_squared(double wbar, std::span<const double> u)
		{
			NearestPenalty best { (wbar - u[0]) * (wbar - u[0]), 0 };
			for (std::size_t r = 1; r < u.size(); r++)
			{
				const double d = wbar - u[r];
				const double v = d * d;
				if (v < best.value)
					best = { v, r };
			}
			return best;
		}

		/// argmin_r |wbar - u_r|, lowest index on ties.
		inline NearestPenalty nearest_abs(double wbar, std::span<const double> u)
		{
			NearestPenalty best { std::abs(wbar - u[0]), 0 };
			for (std::size_t r = 1; r < u.size(); r++)
			{
				const double v = std::abs(wbar - u[r]);
				if (v < best.value)
					best = { v, r };
			}
			return best;
		}
	}

	inline NearestPenalty rho_minl2(double wbar, std::span<const double> u)
	{
		detail::require_nonempty(u);
		return detail::nearest_squared(wbar, u);
	}
	inline NearestPenalty rho_minl2(double wbar, const Codebook &codebook)
	{
		return rho_minl2(wbar, codebook.u);
	}

	inline NearestPenalty rho_exp(double wbar, std::span<const double> u)
	{
		detail::require_nonempty(u);
		const NearestPenalty near = detail::nearest_abs(wbar, u);
		return { 1.0 - std::exp(-near.value), near.index };
	}
	inline NearestPenalty rho_exp(double wbar, const Codebook &codebook)
	{
		return rho_exp(wbar, codebook.u);
	}

	/// Indices of the Dense / Conv2D layers covered by a layer group.
	inline std::vector<std::size_t> selected_layers(const Model &model, LayerGroup group)
	{
		std::vector<std::size_t> out;
		for (std::size_t i = 0; i < model.layers.size(); i++)
		{
			const LayerKind k = model.layers[i].kind;
			const bool take = (k == LayerKind::Conv2D && group != LayerGroup::DenseOnly) || (k == LayerKind::Dense && group != LayerGroup::ConvOnly);
			if (take)
				out.push_back(i);
		}
		return out;
	}

	inline std::vector<std::size_t> require_selected_layers(const Model &model, LayerGroup group)
	{
		auto layers = selected_layers(model, group);
		if (layers.empty())
			throw ConfigError("layer group '" + to_string(group) + "' selects no layers of this model");
		return layers;
	}

	/// Evenly spaced u over [w_min, w_max], endpoints included.
	inline Codebook init_codebook(const RegConfig &config)
	{
		if (config.K < 2)
			throw ConfigError("K must be at least 2, got " + std::to_string(config.K));
		if (!(config.w_min < config.w_max))
			throw ConfigError("weight range requires w_min < w_max");
		std::vector<double> u(static_cast<std::size_t>(config.K));
		const double step = (config.w_max - config.w_min) / (config.K - 1);
		for (int k = 0; k < config.K; k++)
			u[static_cast<std::size_t>(k)] = config.w_min + k * step;
		u.back() = config.w_max;
		return Codebook(std::move(u));
	}

	/// How many codebooks reg_value_and_grads expects for this model/config.
	inline std::size_t codebook_count(const Model &model, const RegConfig &config)
	{
		if (!is_dynamic(config.kind))
			return 0;
		return config.codebook_mode == CodebookMode::Shared ? 1 : require_selected_layers(model, config.layer_group).size();
	}

	inline std::vector<Codebook> init_codebooks(const Model &model, const RegConfig &config)
	{
		return std::vector<Codebook>(codebook_count(model, config), init_codebook(config));
	}

	/// The fixed minima of the static penalties; used as their quantization codebook.
	inline std::vector<double> static_minima(RegKind kind, int K, double w, double W)
	{
		if (!is_static(kind))
			throw MisuseError("static_minima is defined for sine and cos only; '" + to_string(kind) + "' keeps its minima in a Codebook");
		if (K < 2 || !(w < W))
			throw ConfigError("static_minima needs K >= 2 and w < W");
		std::vector<double> out(static_cast<std::size_t>(K));
		for (int k = 0; k < K; k++)
			out[static_cast<std::size_t>(k)] = (kind == RegKind::Sine) ? w + k * (W - w) / (K - 1) : w + (W - w) * (2 * k + 1) / (2.0 * K);
		if (kind == RegKind::Sine)
			out.back() = W;
		return out;
	}

	namespace detail
	{
		inline void check_codebooks(const Model &model, const RegConfig &config, std::size_t provided)
		{
			const std::size_t need = codebook_count(model, config);
			if (is_dynamic(config.kind) && provided != need)
				throw ConfigError("regularizer '" + to_string(config.kind) + "' in " + to_string(config.codebook_mode) + " mode needs " + std::to_string(need)
						+ " codebooks, got " + std::to_string(provided));
		}

		/*
		 * Sum of rho over one layer's weights divided by the entry count. When
		 * grads are requested, adds scale * d/dw into grad_w and scale * d/du
		 * into grad_u.
		 */
		template<bool WithGrads>
		double layer_penalty(const RegConfig &config, std::span<const double> weights, std::span<double> grad_w, std::span<const double> u,
				std::span<double> grad_u, double scale)
		{
			const double inv_n = 1.0 / static_cast<double>(weights.size());
			const double g = scale * inv_n;
			double sum = 0.0;
			switch (config.kind)
			{
				case RegKind::Sine:
					for (std::size_t i = 0; i < weights.size(); i++)
					{
						sum += rho_sine(weights[i], config.K, config.w_min, config.w_max);
						if constexpr (WithGrads)
							grad_w[i] += g * rho_sine_derivative(weights[i], config.K, config.w_min, config.w_max);
					}
					break;
				case RegKind::Cosine:
					for (std::size_t i = 0; i < weights.size(); i++)
					{
						sum += rho_cosine(weights[i], config.K, config.w_min, config.w_max);
						if constexpr (WithGrads)
							grad_w[i] += g * rho_cosine_derivative(weights[i], config.K, config.w_min, config.w_max);
					}
					break;
				case RegKind::MinL2:
					require_nonempty(u);
					for (std::size_t i = 0; i < weights.size(); i++)
					{
						const NearestPenalty p = nearest_squared(weights[i], u);
						sum += p.value;
						if constexpr (WithGrads)
						{
							const double d = 2.0 * (weights[i] - u[p.index]);
							grad_w[i] += g * d;
							grad_u[p.index] -= g * d;
						}
					}
					break;
				case RegKind::Exp:
					require_nonempty(u);
					for (std::size_t i = 0; i < weights.size(); i++)
					{
						const NearestPenalty p = nearest_abs(weights[i], u);
						const double e = std::exp(-p.value);
						sum += 1.0 - e;
						if constexpr (WithGrads)
						{
							const double d = weights[i] - u[p.index];
							if (d != 0.0)
							{
								const double slope = e * (d > 0.0 ? 1.0 : -1.0);
								grad_w[i] += g * slope;
								grad_u[p.index] -= g * slope;
							}
						}
					}
					break;
				case RegKind::None:
					throw MisuseError("no penalty for regularizer kind 'none'");
			}
			return sum * inv_n;
		}

		inline std::vector<std::size_t> prepare(const Model &model, const RegConfig &config, std::size_t codebooks)
		{
			if (config.kind == RegKind::None)
				throw MisuseError("regularizer kind 'none' has no penalty");
			auto layers = require_selected_layers(model, config.layer_group);
			check_codebooks(model, config, codebooks);
			return layers;
		}

		inline std::size_t codebook_slot(const RegConfig &config, std::size_t j) noexcept
		{
			return config.codebook_mode == CodebookMode::Shared ? 0 : j;
		}
	}

	/*
	 * Returns R(W). Adds lambda * dR/dw to every selected layer's
	 * grad_weights and lambda * dR/du to each codebook's grad_u; subgradient 0
	 * is used at |.| kinks. Codebooks: one per selected layer (PerLayer) or a
	 * single one (Shared) for MinL2/Exp; ignored for Sine/Cosine.
	 */
	inline double reg_value_and_grads(Model &model, const RegConfig &config, std::span<Codebook> codebooks)
	{
		const auto layers = detail::prepare(model, config, codebooks.size());
		double total = 0.0;
		for (std::size_t j = 0; j < layers.size(); j++)
		{
			auto &layer = model.layers[layers[j]];
			std::span<const double> u;
			std::span<double> grad_u;
			if (is_dynamic(config.kind))
			{
				Codebook &cb = codebooks[detail::codebook_slot(config, j)];
				if (cb.grad_u.size() != cb.u.size())
					cb.grad_u.assign(cb.u.size(), 0.0);
				u = cb.u;
				grad_u = cb.grad_u;
			}
			total += detail::layer_penalty<true>(config, layer.weights.values(), layer.grad_weights.values(), u, grad_u, config.lambda);
		}
		return total;
	}

	/// R(W) without touching any gradient buffer.
	inline double reg_value(const Model &model, const RegConfig &config, std::span<const Codebook> codebooks)
	{
		const auto layers = detail::prepare(model, config, codebooks.size());
		double total = 0.0;
		for (std::size_t j = 0; j < layers.size(); j++)
		{
			std::span<const double> u;
			if (is_dynamic(config.kind))
				u = codebooks[detail::codebook_slot(config, j)].u;
			total += detail::layer_penalty<false>(config, model.layers[layers[j]].weights.values(), { }, u, { }, 0.0);
		}
		return total;
	}

	/*
	 * Mean over the selected layers' weights of the distance to the nearest
	 * representative of that layer's codebook (per-layer or shared).
	 */
	inline double mean_distance_to_codebook(const Model &model, LayerGroup group, CodebookMode mode, std::span<const Codebook> codebooks)
	{
		const auto layers = require_selected_layers(model, group);
		const std::size_t need = mode == CodebookMode::Shared ? 1 : layers.size();
		if (codebooks.size() != need)
			throw ConfigError("expected " + std::to_string(need) + " codebooks, got " + std::to_string(codebooks.size()));
		double sum = 0.0;
		std::size_t count = 0;
		for (std::size_t j = 0; j < layers.size(); j++)
		{
			const auto &u = codebooks[mode == CodebookMode::Shared ? 0 : j].u;
			detail::require_nonempty(u);
			for (double w : model.layers[layers[j]].weights.data)
				sum += detail::nearest_abs(w, u).value;
			count += model.layers[layers[j]].weights.size();
		}
		return sum / static_cast<double>(count);
	}

} /* namespace qareg */

#endif /* QAREG_REGULARIZERS_HPP_ */
