#ifndef QAREG_TESTS_FIXTURES_HPP_
#define QAREG_TESTS_FIXTURES_HPP_

#include <qareg/qareg.hpp>

namespace fixture
{

	/// Small learnable dataset: class = which quadrant of a [C,4,4] image holds a bright patch.
	inline qareg::Dataset quadrant_data(std::size_t n, std::uint64_t seed, std::size_t channels = 2)
	{
		qareg::Rng rng(seed);
		qareg::Dataset d { qareg::Tensor( { n, channels, 4, 4 }), qareg::Tensor( { n }) };
		const std::size_t per = channels * 16;
		for (std::size_t i = 0; i < n; i++)
		{
			const std::size_t label = i % 4;
			d.labels[i] = static_cast<double>(label);
			const std::size_t qy = (label / 2) * 2, qx = (label % 2) * 2;
			for (std::size_t c = 0; c < channels; c++)
				for (std::size_t y = 0; y < 4; y++)
					for (std::size_t x = 0; x < 4; x++)
					{
						const bool hot = y >= qy && y < qy + 2 && x >= qx && x < qx + 2;
						d.images[i * per + c * 16 + y * 4 + x] = (hot ? 0.6 : -0.2) + 0.3 * rng.normal();
					}
		}
		return d;
	}

	inline qareg::Model small_net(std::uint64_t seed, std::size_t channels = 2)
	{
		qareg::Model m = qareg::build_model( { channels, 4, 4 }, "conv:3,pool,dense:6,dense:4");
		qareg::Rng rng(seed);
		qareg::initialize(m, rng);
		return m;
	}

}

#endif /* QAREG_TESTS_FIXTURES_HPP_ */
