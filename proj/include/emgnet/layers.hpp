#ifndef EMGNET_LAYERS_HPP
#define EMGNET_LAYERS_HPP

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emgnet/rng.hpp"
#include "emgnet/tensor.hpp"

namespace emgnet {

double leaky_relu(double x, double alpha);

// Numerically safe softmax (max subtraction); rejects NaN inputs.
std::vector<double> softmax(const std::vector<double>& logits);

enum class LayerKind { TemporalConv, Fire, SpatialReduction, Dropout, BatchNorm, DenseSoftmax };

std::string to_string(LayerKind kind);

struct LayerSpec {
    LayerKind kind = LayerKind::TemporalConv;
    std::size_t filter_rows = 1;
    std::size_t filter_cols = 1;
    std::size_t out_depth = 0;
    std::size_t squeeze_depth = 0;        // fire only
    std::size_t expand_temporal_rows = 3; // fire only
    double rate = 0.0;                    // dropout only
    double alpha = 0.1;                   // LReLU slope
    Padding padding = Padding::Same;      // temporal conv only
    bool lrelu = true;                    // trailing LReLU (conv/batchnorm layers)

    static LayerSpec temporal_conv(std::size_t rows, std::size_t cols, std::size_t out,
                                   Padding padding = Padding::Same, bool lrelu = true);
    static LayerSpec fire(std::size_t squeeze, std::size_t out, std::size_t expand_rows);
    static LayerSpec spatial_reduction(std::size_t channel_span);
    static LayerSpec dropout(double rate);
    static LayerSpec batchnorm(bool lrelu = false);
    static LayerSpec dense_softmax(std::size_t classes);
};

struct NetworkSpec {
    std::size_t input_rows = 0;
    std::size_t input_cols = 0;
    std::size_t num_classes = 0;
    std::vector<LayerSpec> layers;
};

// Throws UsageError/ShapeError when the stack cannot be shape-propagated or a
// layer violates its constraints. Returns the per-boundary shapes
// (shapes[0] = input, shapes[i+1] = output of layer i).
std::vector<std::array<std::size_t, 3>> validate_spec(const NetworkSpec& spec);

struct LayerParams {
    FilterBank filters;                     // temporal conv / spatial reduction
    FilterBank fire_squeeze;                // fire
    FilterBank fire_expand1;                // fire, 1x1 half
    FilterBank fire_expand_t;               // fire, Tx1 half
    std::vector<double> dense_w;            // dense softmax, in_size x out
    std::vector<double> dense_b;
    std::vector<double> bn_scale;           // batchnorm, one per map
    std::vector<double> bn_shift;
    std::vector<double> bn_running_mean;    // state, not trainable
    std::vector<double> bn_running_var;
};

enum class NetMode { Train, Infer };

struct Network {
    NetworkSpec spec;
    std::vector<LayerParams> params;
    std::vector<std::array<std::size_t, 3>> shapes;
    NetMode mode = NetMode::Infer;
    double bn_momentum = 0.9;
    double bn_epsilon = 1e-5;
};

// Instantiates the stack with Glorot-uniform weights and zero biases.
Network build_network(const NetworkSpec& spec, std::uint64_t seed);

enum class DeviceKind { Myo, Delsys };

DeviceKind device_from_string(const std::string& name);
std::string to_string(DeviceKind device);

// Canonical compact architectures; layer widths and the resulting exact
// per-layer parameter counts are derived in docs/architecture-ledger.md.
NetworkSpec compact_cnn_spec(DeviceKind device);
Network build_compact_cnn(DeviceKind device, std::uint64_t seed);

// 12-block plain CNN baseline: (conv 3x3/1x1, 32 maps, stride 1, same) ->
// batchnorm -> LReLU, block pattern [3,3,3,1] repeated three times, then a
// dense softmax head.
NetworkSpec generic_cnn_spec(std::size_t input_rows, std::size_t input_cols,
                             std::size_t num_classes);
Network build_generic_cnn(std::size_t input_rows, std::size_t input_cols,
                          std::size_t num_classes, std::uint64_t seed);

// Trainable scalars: weights + biases, plus 2 per batchnorm map; running
// statistics are excluded.
std::size_t parameter_count(const Network& net);

// Inference/train-mode single-window pass. Train mode needs an RNG when the
// stack contains active dropout; batchnorm uses running statistics here (use
// forward_batch for batch-statistics training).
std::vector<double> forward(const Network& net, const Tensor& window, Rng* rng = nullptr);

struct LayerTrace {
    std::vector<Tensor> inputs;
    std::vector<Tensor> preact;
    std::vector<Tensor> squeeze_pre;
    std::vector<Tensor> squeeze_out;
    std::vector<std::vector<char>> dropout_mask;
    std::vector<double> bn_mean;
    std::vector<double> bn_var;
    std::vector<Tensor> bn_xhat;
    std::vector<std::vector<double>> logits;
};

struct ForwardTrace {
    std::vector<LayerTrace> layers;
    std::vector<std::vector<double>> probs;
};

// Runs a whole batch through the stack. In train mode batchnorm layers use
// batch statistics (batch size >= 2 required) and update running statistics.
std::vector<std::vector<double>> forward_batch(Network& net, const std::vector<Tensor>& batch,
                                               Rng* rng, ForwardTrace* trace);

struct LayerGrads {
    FilterBankGrad filters;
    FilterBankGrad fire_squeeze;
    FilterBankGrad fire_expand1;
    FilterBankGrad fire_expand_t;
    std::vector<double> dense_w;
    std::vector<double> dense_b;
    std::vector<double> bn_scale;
    std::vector<double> bn_shift;
};

struct NetworkGrads {
    std::vector<LayerGrads> layers;
};

// Mean cross-entropy over the batch plus gradients of that mean with respect
// to every trainable parameter.
double backward_batch(const Network& net, const ForwardTrace& trace,
                      const std::vector<std::size_t>& labels, NetworkGrads& grads);

// Flat mutable/const views over trainable parameters in serialization order.
std::vector<std::span<double>> parameter_views(Network& net);
std::vector<std::span<const double>> parameter_views(const Network& net);
std::vector<std::span<const double>> gradient_views(const NetworkGrads& grads);

NetworkGrads make_zero_grads(const Network& net);

// Standalone layer ops (the network forward is composed from these).
Tensor dropout_forward(const Tensor& input, double rate, NetMode mode, std::uint64_t rng_seed);

struct BatchNormParams {
    std::vector<double> scale;
    std::vector<double> shift;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.9;
    double epsilon = 1e-5;
};

std::vector<Tensor> batchnorm_forward(const std::vector<Tensor>& batch, BatchNormParams& params,
                                      NetMode mode);

Tensor temporal_fire_forward(const Tensor& input, const FilterBank& squeeze,
                             const FilterBank& expand1, const FilterBank& expand_t,
                             double alpha);

Tensor spatial_reduction_forward(const Tensor& input, const FilterBank& filters, double alpha);

// Versioned binary model file: magic + version + canonical spec JSON +
// little-endian float64 parameters (and batchnorm running stats) in layer
// order. Round-trips are bit exact.
void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

std::string network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const std::string& text);

} // namespace emgnet

#endif
