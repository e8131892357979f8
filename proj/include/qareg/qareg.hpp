// Umbrella header.
#ifndef QAREG_QAREG_HPP_
#define QAREG_QAREG_HPP_

#include <qareg/tensor.hpp>
#include <qareg/nn.hpp>
#include <qareg/cifar.hpp>
#include <qareg/regularizers.hpp>
#include <qareg/quantizer.hpp>
#include <qareg/training.hpp>
#include <qareg/checkpoint.hpp>
#include <qareg/experiment.hpp>

#endif /* QAREG_QAREG_HPP_ */
