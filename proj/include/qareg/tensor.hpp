/*
 * tensor.hpp
 *
 * Dense row-major tensor of doubles, error types and a portable seeded RNG.
 */

#ifndef QAREG_TENSOR_HPP_
#define QAREG_TENSOR_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace qareg
{

	class Error : public std::runtime_error
	{
		public:
			using std::runtime_error::runtime_error;
	};

	/// Tensor shapes do not compose.
	class DimensionError : public Error
	{
		public:
			using Error::Error;
	};

	/// Bad caller-supplied data (labels out of range, empty batch, ...).
	class InputError : public Error
	{
		public:
			using Error::Error;
	};

	/// Malformed file contents.
	class FormatError : public Error
	{
		public:
			using Error::Error;
	};

	class ConfigError : public Error
	{
		public:
			using Error::Error;
	};

	class MisuseError : public Error
	{
		public:
			using Error::Error;
	};

	class IoError : public Error
	{
		public:
			using Error::Error;
	};

	/// Training produced a non-finite objective.
	class DivergenceError : public Error
	{
		public:
			using Error::Error;
	};

	using Shape = std::vector<std::size_t>;

	inline std::size_t shape_volume(const Shape &shape) noexcept
	{
		return std::accumulate(shape.begin(), shape.end(), std::size_t { 1 }, std::multiplies<> { });
	}

	inline std::string shape_to_string(const Shape &shape)
	{
		std::ostringstream ss;
		ss << '[';
		for (std::size_t i = 0; i < shape.size(); i++)
			ss << (i == 0 ? "" : ",") << shape[i];
		ss << ']';
		return ss.str();
	}

	/// Tensor storage; a fixed alignment keeps vectorized reductions run-to-run reproducible.
	using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

	class Tensor
	{
		public:
			Shape shape;
			Storage data;

			Tensor() = default;
			explicit Tensor(Shape s, double fill = 0.0) :
					shape(std::move(s)),
					data(shape_volume(shape), fill)
			{
			}
			Tensor(Shape s, std::vector<double> values) :
					shape(std::move(s)),
					data(values.begin(), values.end())
			{
				if (shape_volume(shape) != data.size())
					throw DimensionError("tensor shape " + shape_to_string(shape) + " does not match " + std::to_string(data.size()) + " values");
			}

			std::size_t size() const noexcept
			{
				return data.size();
			}
			std::size_t rank() const noexcept
			{
				return shape.size();
			}
			bool empty() const noexcept
			{
				return data.empty();
			}
			std::size_t dim(std::size_t i) const
			{
				return shape.at(i);
			}
			double& operator[](std::size_t i) noexcept
			{
				return data[i];
			}
			double operator[](std::size_t i) const noexcept
			{
				return data[i];
			}
			std::span<double> values() noexcept
			{
				return data;
			}
			std::span<const double> values() const noexcept
			{
				return data;
			}
			void fill(double v) noexcept
			{
				std::fill(data.begin(), data.end(), v);
			}
			bool all_finite() const noexcept
			{
				for (double v : data)
					if (!std::isfinite(v))
						return false;
				return true;
			}
			friend bool operator==(const Tensor&, const Tensor&) = default;
	};

	/*
	 * mt19937_64 with hand-rolled distributions, so that a seed reproduces the
	 * same stream regardless of the standard library implementation.
	 */
	class Rng
	{
			std::mt19937_64 m_engine;
		public:
			explicit Rng(std::uint64_t seed) :
					m_engine(seed)
			{
			}
			std::uint64_t next_u64()
			{
				return m_engine();
			}
			/// Uniform in [0, 1).
			double uniform()
			{
				return static_cast<double>(m_engine() >> 11) * 0x1.0p-53;
			}
			double uniform(double lo, double hi)
			{
				return lo + (hi - lo) * uniform();
			}
			/// Uniform integer in [0, n).
			std::size_t below(std::size_t n)
			{
				// rejection sampling: no modulo bias
				const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
				std::uint64_t x;
				do
					x = m_engine();
				while (x >= limit);
				return static_cast<std::size_t>(x % n);
			}
			double normal()
			{
				double u1 = uniform();
				while (u1 <= 0.0)
					u1 = uniform();
				const double u2 = uniform();
				return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
			}
			template<typename T>
			void shuffle(std::vector<T> &v)
			{
				for (std::size_t i = v.size(); i > 1; i--)
					std::swap(v[i - 1], v[below(i)]);
			}
	};

	/// splitmix64 finalizer; derives independent sub-seeds.
	constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept
	{
		std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
		z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
		z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
		return z ^ (z >> 31);
	}

} /* namespace qareg */

#endif /* QAREG_TENSOR_HPP_ */
