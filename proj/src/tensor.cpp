#include "emgnet/tensor.hpp"

#include <cstddef>
#include <string>

#include "emgnet/errors.hpp"

namespace emgnet {

namespace {

struct ConvShape {
    std::size_t out_rows;
    std::size_t out_cols;
    // Signed offset added to (output index + tap index) to get the input index.
    std::ptrdiff_t row_shift;
    std::ptrdiff_t col_shift;
};

ConvShape conv_shape(const Tensor& input, const FilterBank& filters, Padding padding) {
    if (input.depth != filters.in_depth) {
        throw ShapeError("conv2d: input depth " + std::to_string(input.depth) +
                         " does not match filter in_depth " + std::to_string(filters.in_depth));
    }
    if (filters.filter_rows == 0 || filters.filter_cols == 0 || filters.out_depth == 0) {
        throw ShapeError("conv2d: degenerate filter bank");
    }
    ConvShape s{};
    if (padding == Padding::Same) {
        s.out_rows = input.rows;
        s.out_cols = input.cols;
        // Anchor offset ceil(R/2)-1: a 3-tap filter reaches one row above and
        // one below, a 1-tap filter stays centered.
        s.row_shift = -static_cast<std::ptrdiff_t>((filters.filter_rows + 1) / 2 - 1);
        s.col_shift = -static_cast<std::ptrdiff_t>((filters.filter_cols + 1) / 2 - 1);
    } else {
        if (input.rows < filters.filter_rows) {
            throw ShapeError("conv2d: input rows " + std::to_string(input.rows) +
                             " smaller than filter rows " + std::to_string(filters.filter_rows));
        }
        if (input.cols < filters.filter_cols) {
            throw ShapeError("conv2d: input cols " + std::to_string(input.cols) +
                             " smaller than filter cols " + std::to_string(filters.filter_cols));
        }
        s.out_rows = input.rows - filters.filter_rows + 1;
        s.out_cols = input.cols - filters.filter_cols + 1;
        s.row_shift = 0;
        s.col_shift = 0;
    }
    return s;
}

} // namespace

std::string Tensor::shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols) + "x" + std::to_string(depth);
}

Tensor conv2d_output_shape_like(const Tensor& input, const FilterBank& filters,
                                Padding padding) {
    const ConvShape s = conv_shape(input, filters, padding);
    return Tensor(s.out_rows, s.out_cols, filters.out_depth);
}

Tensor conv2d(const Tensor& input, const FilterBank& filters, Padding padding) {
    const ConvShape s = conv_shape(input, filters, padding);
    Tensor out(s.out_rows, s.out_cols, filters.out_depth);

    const std::size_t in_d = filters.in_depth;
    const std::size_t out_d = filters.out_depth;
    for (std::size_t r = 0; r < s.out_rows; ++r) {
        for (std::size_t c = 0; c < s.out_cols; ++c) {
            double* out_px = &out.data[(r * s.out_cols + c) * out_d];
            for (std::size_t k = 0; k < out_d; ++k) out_px[k] = filters.biases[k];
            for (std::size_t i = 0; i < filters.filter_rows; ++i) {
                const std::ptrdiff_t ir = static_cast<std::ptrdiff_t>(r + i) + s.row_shift;
                if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(input.rows)) continue;
                for (std::size_t j = 0; j < filters.filter_cols; ++j) {
                    const std::ptrdiff_t ic = static_cast<std::ptrdiff_t>(c + j) + s.col_shift;
                    if (ic < 0 || ic >= static_cast<std::ptrdiff_t>(input.cols)) continue;
                    const double* in_px =
                        &input.data[(static_cast<std::size_t>(ir) * input.cols +
                                     static_cast<std::size_t>(ic)) * in_d];
                    const double* w_tap = &filters.weights[(i * filters.filter_cols + j) * in_d];
                    const std::size_t tap_stride = filters.filter_rows * filters.filter_cols * in_d;
                    for (std::size_t k = 0; k < out_d; ++k) {
                        const double* wk = w_tap + k * tap_stride;
                        double acc = 0.0;
                        for (std::size_t m = 0; m < in_d; ++m) acc += wk[m] * in_px[m];
                        out_px[k] += acc;
                    }
                }
            }
        }
    }
    return out;
}

ConvGradients conv2d_backward(const Tensor& input, const FilterBank& filters,
                              const Tensor& upstream_grad, Padding padding) {
    const ConvShape s = conv_shape(input, filters, padding);
    if (upstream_grad.rows != s.out_rows || upstream_grad.cols != s.out_cols ||
        upstream_grad.depth != filters.out_depth) {
        throw ShapeError("conv2d_backward: upstream gradient shape " + upstream_grad.shape_str() +
                         " does not match output shape " +
                         Tensor(s.out_rows, s.out_cols, filters.out_depth).shape_str());
    }

    ConvGradients g;
    g.input_grad = Tensor(input.rows, input.cols, input.depth);
    g.filter_grad.weights.assign(filters.weights.size(), 0.0);
    g.filter_grad.biases.assign(filters.biases.size(), 0.0);

    const std::size_t in_d = filters.in_depth;
    const std::size_t out_d = filters.out_depth;
    const std::size_t tap_stride = filters.filter_rows * filters.filter_cols * in_d;
    for (std::size_t r = 0; r < s.out_rows; ++r) {
        for (std::size_t c = 0; c < s.out_cols; ++c) {
            const double* up_px = &upstream_grad.data[(r * s.out_cols + c) * out_d];
            for (std::size_t k = 0; k < out_d; ++k) g.filter_grad.biases[k] += up_px[k];
            for (std::size_t i = 0; i < filters.filter_rows; ++i) {
                const std::ptrdiff_t ir = static_cast<std::ptrdiff_t>(r + i) + s.row_shift;
                if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(input.rows)) continue;
                for (std::size_t j = 0; j < filters.filter_cols; ++j) {
                    const std::ptrdiff_t ic = static_cast<std::ptrdiff_t>(c + j) + s.col_shift;
                    if (ic < 0 || ic >= static_cast<std::ptrdiff_t>(input.cols)) continue;
                    const std::size_t in_base =
                        (static_cast<std::size_t>(ir) * input.cols + static_cast<std::size_t>(ic)) *
                        in_d;
                    const std::size_t w_base = (i * filters.filter_cols + j) * in_d;
                    for (std::size_t k = 0; k < out_d; ++k) {
                        const double up = up_px[k];
                        if (up == 0.0) continue;
                        const double* wk = &filters.weights[w_base + k * tap_stride];
                        double* wg = &g.filter_grad.weights[w_base + k * tap_stride];
                        double* ig = &g.input_grad.data[in_base];
                        const double* in_px = &input.data[in_base];
                        for (std::size_t m = 0; m < in_d; ++m) {
                            wg[m] += up * in_px[m];
                            ig[m] += up * wk[m];
                        }
                    }
                }
            }
        }
    }
    return g;
}

std::vector<double> dense(const Tensor& input, const std::vector<double>& weights,
                          const std::vector<double>& biases) {
    const std::size_t in_size = input.size();
    const std::size_t out_size = biases.size();
    if (weights.size() != in_size * out_size) {
        throw ShapeError("dense: weight matrix size " + std::to_string(weights.size()) +
                         " does not match in_size*out_size = " +
                         std::to_string(in_size * out_size));
    }
    std::vector<double> out(biases);
    for (std::size_t k = 0; k < in_size; ++k) {
        const double x = input.data[k];
        if (x == 0.0) continue;
        const double* wrow = &weights[k * out_size];
        for (std::size_t r = 0; r < out_size; ++r) out[r] += wrow[r] * x;
    }
    return out;
}

DenseGradients dense_backward(const Tensor& input, const std::vector<double>& weights,
                              const std::vector<double>& biases,
                              const std::vector<double>& upstream_grad) {
    const std::size_t in_size = input.size();
    const std::size_t out_size = biases.size();
    if (weights.size() != in_size * out_size) {
        throw ShapeError("dense_backward: weight matrix size mismatch");
    }
    if (upstream_grad.size() != out_size) {
        throw ShapeError("dense_backward: upstream gradient length " +
                         std::to_string(upstream_grad.size()) + " != out_size " +
                         std::to_string(out_size));
    }
    DenseGradients g;
    g.input_grad = Tensor(input.rows, input.cols, input.depth);
    g.weight_grad.assign(weights.size(), 0.0);
    g.bias_grad = upstream_grad;
    for (std::size_t k = 0; k < in_size; ++k) {
        const double x = input.data[k];
        const double* wrow = &weights[k * out_size];
        double* wg = &g.weight_grad[k * out_size];
        double acc = 0.0;
        for (std::size_t r = 0; r < out_size; ++r) {
            const double up = upstream_grad[r];
            wg[r] = x * up;
            acc += wrow[r] * up;
        }
        g.input_grad.data[k] = acc;
    }
    return g;
}

} // namespace emgnet
