#ifndef EMGNET_TENSOR_HPP
#define EMGNET_TENSOR_HPP

#include <cstddef>
#include <string>
#include <vector>

namespace emgnet {

enum class Padding { Same, Valid };

// Dense rank-3 array (rows x cols x depth), row-major with depth fastest:
// index(r, c, d) = (r * cols + c) * depth + d.
struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t depth = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c, std::size_t d, double fill = 0.0)
        : rows(r), cols(c), depth(d), data(r * c * d, fill) {}

    std::size_t size() const { return data.size(); }

    double& at(std::size_t r, std::size_t c, std::size_t d) {
        return data[(r * cols + c) * depth + d];
    }
    double at(std::size_t r, std::size_t c, std::size_t d) const {
        return data[(r * cols + c) * depth + d];
    }

    bool same_shape(const Tensor& other) const {
        return rows == other.rows && cols == other.cols && depth == other.depth;
    }

    std::string shape_str() const;
};

// A stack of out_depth convolution filters of size filter_rows x filter_cols
// over in_depth input maps. Weight layout keeps the input depth fastest:
// index(k, i, j, m) = ((k * filter_rows + i) * filter_cols + j) * in_depth + m.
struct FilterBank {
    std::size_t filter_rows = 0;
    std::size_t filter_cols = 0;
    std::size_t in_depth = 0;
    std::size_t out_depth = 0;
    std::vector<double> weights;
    std::vector<double> biases;

    FilterBank() = default;
    FilterBank(std::size_t fr, std::size_t fc, std::size_t in_d, std::size_t out_d)
        : filter_rows(fr), filter_cols(fc), in_depth(in_d), out_depth(out_d),
          weights(fr * fc * in_d * out_d, 0.0), biases(out_d, 0.0) {}

    double& w(std::size_t k, std::size_t i, std::size_t j, std::size_t m) {
        return weights[((k * filter_rows + i) * filter_cols + j) * in_depth + m];
    }
    double w(std::size_t k, std::size_t i, std::size_t j, std::size_t m) const {
        return weights[((k * filter_rows + i) * filter_cols + j) * in_depth + m];
    }

    std::size_t parameter_count() const { return weights.size() + biases.size(); }
};

// Gradients of a scalar loss with respect to a FilterBank's weights and
// biases, same layout as the bank itself.
struct FilterBankGrad {
    std::vector<double> weights;
    std::vector<double> biases;
};

// 2D convolution, stride 1. Same padding zero-fills the border and anchors
// the filter at offset ceil(R/2)-1 / ceil(C/2)-1; valid padding shrinks the
// output to rows - R + 1 by cols - C + 1. Output depth is the filter count.
// The result is the pre-activation sum plus bias; activations are applied by
// the caller.
Tensor conv2d(const Tensor& input, const FilterBank& filters, Padding padding);

struct ConvGradients {
    Tensor input_grad;
    FilterBankGrad filter_grad;
};

ConvGradients conv2d_backward(const Tensor& input, const FilterBank& filters,
                              const Tensor& upstream_grad, Padding padding);

Tensor conv2d_output_shape_like(const Tensor& input, const FilterBank& filters,
                                Padding padding);

// Fully connected layer over the flattened input. weights is an
// in_size x out_size matrix, row-major: weights[k * out_size + r].
std::vector<double> dense(const Tensor& input, const std::vector<double>& weights,
                          const std::vector<double>& biases);

struct DenseGradients {
    Tensor input_grad;
    std::vector<double> weight_grad;
    std::vector<double> bias_grad;
};

DenseGradients dense_backward(const Tensor& input, const std::vector<double>& weights,
                              const std::vector<double>& biases,
                              const std::vector<double>& upstream_grad);

} // namespace emgnet

#endif
