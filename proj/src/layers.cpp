#include "emgnet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include <json.hpp>

#include "emgnet/errors.hpp"
#include "emgnet/serialize.hpp"
#include "emgnet/training.hpp"

namespace emgnet {

namespace {

constexpr char kModelMagic[8] = {'E', 'M', 'G', 'N', 'E', 'T', 'B', '1'};
constexpr std::uint32_t kModelVersion = 1;

Tensor lrelu_tensor(const Tensor& t, double alpha) {
    Tensor out = t;
    for (double& v : out.data) v = leaky_relu(v, alpha);
    return out;
}

// d lrelu(x) / dx evaluated at the pre-activation value.
double lrelu_slope(double preact, double alpha) { return preact >= 0.0 ? 1.0 : alpha; }

Tensor concat_depth(const Tensor& a, const Tensor& b) {
    Tensor out(a.rows, a.cols, a.depth + b.depth);
    for (std::size_t r = 0; r < a.rows; ++r) {
        for (std::size_t c = 0; c < a.cols; ++c) {
            double* dst = &out.data[(r * out.cols + c) * out.depth];
            const double* pa = &a.data[(r * a.cols + c) * a.depth];
            const double* pb = &b.data[(r * b.cols + c) * b.depth];
            std::copy(pa, pa + a.depth, dst);
            std::copy(pb, pb + b.depth, dst + a.depth);
        }
    }
    return out;
}

std::pair<Tensor, Tensor> split_depth(const Tensor& t, std::size_t first_depth) {
    Tensor a(t.rows, t.cols, first_depth);
    Tensor b(t.rows, t.cols, t.depth - first_depth);
    for (std::size_t r = 0; r < t.rows; ++r) {
        for (std::size_t c = 0; c < t.cols; ++c) {
            const double* src = &t.data[(r * t.cols + c) * t.depth];
            std::copy(src, src + first_depth, &a.data[(r * a.cols + c) * a.depth]);
            std::copy(src + first_depth, src + t.depth, &b.data[(r * b.cols + c) * b.depth]);
        }
    }
    return {std::move(a), std::move(b)};
}

void init_filter_bank(FilterBank& bank, Rng& rng) {
    const std::size_t receptive = bank.filter_rows * bank.filter_cols;
    const std::size_t fan_in = receptive * bank.in_depth;
    const std::size_t fan_out = receptive * bank.out_depth;
    for (double& w : bank.weights) w = glorot_uniform_sample(fan_in, fan_out, rng);
    std::fill(bank.biases.begin(), bank.biases.end(), 0.0);
}

void add_scaled(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace

double leaky_relu(double x, double alpha) { return x >= 0.0 ? x : alpha * x; }

std::vector<double> softmax(const std::vector<double>& logits) {
    if (logits.empty()) throw UsageError("softmax: empty input");
    double max_logit = logits[0];
    for (double v : logits) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
        max_logit = std::max(max_logit, v);
    }
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - max_logit);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::TemporalConv: return "temporal_conv";
        case LayerKind::Fire: return "fire";
        case LayerKind::SpatialReduction: return "spatial_reduction";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::DenseSoftmax: return "dense_softmax";
    }
    return "?";
}

namespace {
LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "temporal_conv") return LayerKind::TemporalConv;
    if (s == "fire") return LayerKind::Fire;
    if (s == "spatial_reduction") return LayerKind::SpatialReduction;
    if (s == "dropout") return LayerKind::Dropout;
    if (s == "batchnorm") return LayerKind::BatchNorm;
    if (s == "dense_softmax") return LayerKind::DenseSoftmax;
    throw DataError("unknown layer kind '" + s + "'");
}
} // namespace

LayerSpec LayerSpec::temporal_conv(std::size_t rows, std::size_t cols, std::size_t out,
                                   Padding padding, bool lrelu) {
    LayerSpec s;
    s.kind = LayerKind::TemporalConv;
    s.filter_rows = rows;
    s.filter_cols = cols;
    s.out_depth = out;
    s.padding = padding;
    s.lrelu = lrelu;
    return s;
}

LayerSpec LayerSpec::fire(std::size_t squeeze, std::size_t out, std::size_t expand_rows) {
    LayerSpec s;
    s.kind = LayerKind::Fire;
    s.squeeze_depth = squeeze;
    s.out_depth = out;
    s.expand_temporal_rows = expand_rows;
    return s;
}

LayerSpec LayerSpec::spatial_reduction(std::size_t channel_span) {
    LayerSpec s;
    s.kind = LayerKind::SpatialReduction;
    s.filter_rows = 1;
    s.filter_cols = channel_span;
    s.out_depth = 2;
    return s;
}

LayerSpec LayerSpec::dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::Dropout;
    s.rate = rate;
    s.lrelu = false;
    return s;
}

LayerSpec LayerSpec::batchnorm(bool lrelu) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.lrelu = lrelu;
    return s;
}

LayerSpec LayerSpec::dense_softmax(std::size_t classes) {
    LayerSpec s;
    s.kind = LayerKind::DenseSoftmax;
    s.out_depth = classes;
    s.lrelu = false;
    return s;
}

std::vector<std::array<std::size_t, 3>> validate_spec(const NetworkSpec& spec) {
    if (spec.input_rows < 1 || spec.input_cols < 1) {
        throw UsageError("network spec: input dimensions must be >= 1");
    }
    if (spec.num_classes < 2) throw UsageError("network spec: need at least 2 classes");
    if (spec.layers.empty()) throw UsageError("network spec: no layers");

    std::vector<std::array<std::size_t, 3>> shapes;
    shapes.push_back({spec.input_rows, spec.input_cols, 1});

    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& layer = spec.layers[li];
        const auto [rows, cols, depth] = shapes.back();
        const std::string where = "layer " + std::to_string(li) + " (" + to_string(layer.kind) + ")";
        if (layer.alpha <= 0.0 || layer.alpha >= 1.0) {
            throw UsageError(where + ": alpha must be in (0,1)");
        }
        const bool is_last = li + 1 == spec.layers.size();
        if (is_last != (layer.kind == LayerKind::DenseSoftmax)) {
            throw UsageError("network spec: the dense_softmax head must be exactly the last layer");
        }
        switch (layer.kind) {
            case LayerKind::TemporalConv: {
                if (layer.filter_rows < 1 || layer.filter_cols < 1 || layer.out_depth < 1) {
                    throw UsageError(where + ": degenerate filter geometry");
                }
                if (layer.padding == Padding::Valid &&
                    (rows < layer.filter_rows || cols < layer.filter_cols)) {
                    throw ShapeError(where + ": valid padding needs input >= filter size");
                }
                const std::size_t out_rows =
                    layer.padding == Padding::Same ? rows : rows - layer.filter_rows + 1;
                const std::size_t out_cols =
                    layer.padding == Padding::Same ? cols : cols - layer.filter_cols + 1;
                shapes.push_back({out_rows, out_cols, layer.out_depth});
                break;
            }
            case LayerKind::Fire: {
                if (layer.out_depth % 2 != 0) {
                    throw UsageError(where + ": out_depth must be even (two equal expand halves)");
                }
                if (layer.squeeze_depth < 1 || layer.squeeze_depth > layer.out_depth) {
                    throw UsageError(where + ": squeeze_depth must be in [1, out_depth]");
                }
                if (layer.expand_temporal_rows < 1) {
                    throw UsageError(where + ": expand_temporal_rows must be >= 1");
                }
                shapes.push_back({rows, cols, layer.out_depth});
                break;
            }
            case LayerKind::SpatialReduction: {
                if (layer.filter_cols != cols) {
                    throw UsageError(where + ": filter_cols " + std::to_string(layer.filter_cols) +
                                     " must span all " + std::to_string(cols) + " channels");
                }
                if (layer.out_depth != 2) {
                    throw UsageError(where + ": spatial reduction uses exactly 2 filters");
                }
                shapes.push_back({rows, 1, 2});
                break;
            }
            case LayerKind::Dropout: {
                if (layer.rate < 0.0 || layer.rate >= 1.0) {
                    throw UsageError(where + ": rate must be in [0,1)");
                }
                shapes.push_back({rows, cols, depth});
                break;
            }
            case LayerKind::BatchNorm: {
                shapes.push_back({rows, cols, depth});
                break;
            }
            case LayerKind::DenseSoftmax: {
                if (layer.out_depth != spec.num_classes) {
                    throw UsageError(where + ": head width " + std::to_string(layer.out_depth) +
                                     " != num_classes " + std::to_string(spec.num_classes));
                }
                shapes.push_back({1, 1, spec.num_classes});
                break;
            }
        }
    }
    return shapes;
}

Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
    Network net;
    net.spec = spec;
    net.shapes = validate_spec(spec);
    net.params.resize(spec.layers.size());
    Rng rng(seed);

    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& layer = spec.layers[li];
        LayerParams& p = net.params[li];
        const auto [rows, cols, depth] = net.shapes[li];
        switch (layer.kind) {
            case LayerKind::TemporalConv:
            case LayerKind::SpatialReduction: {
                p.filters = FilterBank(layer.filter_rows, layer.filter_cols, depth, layer.out_depth);
                init_filter_bank(p.filters, rng);
                break;
            }
            case LayerKind::Fire: {
                const std::size_t half = layer.out_depth / 2;
                p.fire_squeeze = FilterBank(1, 1, depth, layer.squeeze_depth);
                p.fire_expand1 = FilterBank(1, 1, layer.squeeze_depth, half);
                p.fire_expand_t = FilterBank(layer.expand_temporal_rows, 1, layer.squeeze_depth, half);
                init_filter_bank(p.fire_squeeze, rng);
                init_filter_bank(p.fire_expand1, rng);
                init_filter_bank(p.fire_expand_t, rng);
                break;
            }
            case LayerKind::BatchNorm: {
                p.bn_scale.assign(depth, 1.0);
                p.bn_shift.assign(depth, 0.0);
                p.bn_running_mean.assign(depth, 0.0);
                p.bn_running_var.assign(depth, 1.0);
                break;
            }
            case LayerKind::DenseSoftmax: {
                const std::size_t in_size = rows * cols * depth;
                p.dense_w.resize(in_size * layer.out_depth);
                for (double& w : p.dense_w) w = glorot_uniform_sample(in_size, layer.out_depth, rng);
                p.dense_b.assign(layer.out_depth, 0.0);
                break;
            }
            case LayerKind::Dropout:
                break;
        }
    }
    return net;
}

DeviceKind device_from_string(const std::string& name) {
    if (name == "myo") return DeviceKind::Myo;
    if (name == "delsys") return DeviceKind::Delsys;
    throw UsageError("unknown device '" + name + "' (expected myo or delsys)");
}

std::string to_string(DeviceKind device) {
    return device == DeviceKind::Myo ? "myo" : "delsys";
}

NetworkSpec compact_cnn_spec(DeviceKind device) {
    NetworkSpec spec;
    spec.num_classes = 15;
    if (device == DeviceKind::Myo) {
        spec.input_rows = 30;
        spec.input_cols = 8;
        spec.layers.push_back(LayerSpec::temporal_conv(3, 1, 64));
    } else {
        spec.input_rows = 300;
        spec.input_cols = 5;
        spec.layers.push_back(LayerSpec::temporal_conv(50, 1, 64));
    }
    spec.layers.push_back(LayerSpec::fire(8, 32, 3));
    spec.layers.push_back(LayerSpec::fire(16, 64, 3));
    spec.layers.push_back(LayerSpec::spatial_reduction(spec.input_cols));
    spec.layers.push_back(LayerSpec::dropout(0.5));
    spec.layers.push_back(LayerSpec::dense_softmax(spec.num_classes));
    return spec;
}

Network build_compact_cnn(DeviceKind device, std::uint64_t seed) {
    return build_network(compact_cnn_spec(device), seed);
}

NetworkSpec generic_cnn_spec(std::size_t input_rows, std::size_t input_cols,
                             std::size_t num_classes) {
    NetworkSpec spec;
    spec.input_rows = input_rows;
    spec.input_cols = input_cols;
    spec.num_classes = num_classes;
    const std::size_t pattern[4] = {3, 3, 3, 1};
    for (int repeat = 0; repeat < 3; ++repeat) {
        for (std::size_t k : pattern) {
            spec.layers.push_back(LayerSpec::temporal_conv(k, k, 32, Padding::Same, false));
            spec.layers.push_back(LayerSpec::batchnorm(true));
        }
    }
    spec.layers.push_back(LayerSpec::dense_softmax(num_classes));
    return spec;
}

Network build_generic_cnn(std::size_t input_rows, std::size_t input_cols,
                          std::size_t num_classes, std::uint64_t seed) {
    return build_network(generic_cnn_spec(input_rows, input_cols, num_classes), seed);
}

std::size_t parameter_count(const Network& net) {
    std::size_t total = 0;
    for (const auto view : parameter_views(net)) total += view.size();
    return total;
}

namespace {

std::vector<Tensor> step_layer(Network& net, std::size_t li, std::vector<Tensor> batch,
                               NetMode mode, Rng* rng, LayerTrace* trace) {
    const LayerSpec& layer = net.spec.layers[li];
    LayerParams& p = net.params[li];
    std::vector<Tensor> out(batch.size());

    auto conv_like = [&](const FilterBank& bank, Padding padding) {
        for (std::size_t b = 0; b < batch.size(); ++b) {
            Tensor pre = conv2d(batch[b], bank, padding);
            out[b] = layer.lrelu ? lrelu_tensor(pre, layer.alpha) : pre;
            if (trace) trace->preact.push_back(std::move(pre));
        }
    };

    switch (layer.kind) {
        case LayerKind::TemporalConv:
            conv_like(p.filters, layer.padding);
            break;
        case LayerKind::SpatialReduction:
            conv_like(p.filters, Padding::Valid);
            break;
        case LayerKind::Fire: {
            for (std::size_t b = 0; b < batch.size(); ++b) {
                Tensor sq_pre = conv2d(batch[b], p.fire_squeeze, Padding::Same);
                Tensor sq_out = lrelu_tensor(sq_pre, layer.alpha);
                Tensor e1 = conv2d(sq_out, p.fire_expand1, Padding::Same);
                Tensor et = conv2d(sq_out, p.fire_expand_t, Padding::Same);
                Tensor pre = concat_depth(e1, et);
                out[b] = lrelu_tensor(pre, layer.alpha);
                if (trace) {
                    trace->squeeze_pre.push_back(std::move(sq_pre));
                    trace->squeeze_out.push_back(std::move(sq_out));
                    trace->preact.push_back(std::move(pre));
                }
            }
            break;
        }
        case LayerKind::Dropout: {
            if (mode == NetMode::Infer || layer.rate == 0.0) {
                out = std::move(batch);
                if (trace) trace->inputs.clear();  // identity; nothing cached
                return out;
            }
            if (rng == nullptr) {
                throw UsageError("dropout in train mode needs an RNG");
            }
            const double keep_scale = 1.0 / (1.0 - layer.rate);
            for (std::size_t b = 0; b < batch.size(); ++b) {
                out[b] = batch[b];
                std::vector<char> mask(out[b].size());
                for (std::size_t i = 0; i < mask.size(); ++i) {
                    mask[i] = rng->uniform01() >= layer.rate ? 1 : 0;
                    out[b].data[i] = mask[i] ? out[b].data[i] * keep_scale : 0.0;
                }
                if (trace) trace->dropout_mask.push_back(std::move(mask));
            }
            break;
        }
        case LayerKind::BatchNorm: {
            const auto [rows, cols, depth] = net.shapes[li];
            const std::size_t plane = rows * cols;
            if (mode == NetMode::Train) {
                if (batch.size() < 2) {
                    throw UsageError("batchnorm: train mode needs batch size >= 2");
                }
                const double n = static_cast<double>(batch.size() * plane);
                std::vector<double> mean(depth, 0.0);
                std::vector<double> var(depth, 0.0);
                for (const Tensor& t : batch) {
                    for (std::size_t px = 0; px < plane; ++px) {
                        const double* v = &t.data[px * depth];
                        for (std::size_t m = 0; m < depth; ++m) mean[m] += v[m];
                    }
                }
                for (std::size_t m = 0; m < depth; ++m) mean[m] /= n;
                for (const Tensor& t : batch) {
                    for (std::size_t px = 0; px < plane; ++px) {
                        const double* v = &t.data[px * depth];
                        for (std::size_t m = 0; m < depth; ++m) {
                            const double d = v[m] - mean[m];
                            var[m] += d * d;
                        }
                    }
                }
                for (std::size_t m = 0; m < depth; ++m) var[m] /= n;
                for (std::size_t m = 0; m < depth; ++m) {
                    p.bn_running_mean[m] =
                        net.bn_momentum * p.bn_running_mean[m] + (1.0 - net.bn_momentum) * mean[m];
                    p.bn_running_var[m] =
                        net.bn_momentum * p.bn_running_var[m] + (1.0 - net.bn_momentum) * var[m];
                }
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    Tensor xhat(rows, cols, depth);
                    Tensor pre(rows, cols, depth);
                    for (std::size_t px = 0; px < plane; ++px) {
                        const double* v = &batch[b].data[px * depth];
                        double* xh = &xhat.data[px * depth];
                        double* pr = &pre.data[px * depth];
                        for (std::size_t m = 0; m < depth; ++m) {
                            xh[m] = (v[m] - mean[m]) / std::sqrt(var[m] + net.bn_epsilon);
                            pr[m] = p.bn_scale[m] * xh[m] + p.bn_shift[m];
                        }
                    }
                    out[b] = layer.lrelu ? lrelu_tensor(pre, layer.alpha) : pre;
                    if (trace) {
                        trace->bn_xhat.push_back(std::move(xhat));
                        trace->preact.push_back(std::move(pre));
                    }
                }
                if (trace) {
                    trace->bn_mean = mean;
                    trace->bn_var = var;
                }
            } else {
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    Tensor pre(rows, cols, depth);
                    for (std::size_t px = 0; px < plane; ++px) {
                        const double* v = &batch[b].data[px * depth];
                        double* pr = &pre.data[px * depth];
                        for (std::size_t m = 0; m < depth; ++m) {
                            pr[m] = p.bn_scale[m] * (v[m] - p.bn_running_mean[m]) /
                                        std::sqrt(p.bn_running_var[m] + net.bn_epsilon) +
                                    p.bn_shift[m];
                        }
                    }
                    out[b] = layer.lrelu ? lrelu_tensor(pre, layer.alpha) : pre;
                    if (trace) trace->preact.push_back(std::move(pre));
                }
            }
            break;
        }
        case LayerKind::DenseSoftmax: {
            for (std::size_t b = 0; b < batch.size(); ++b) {
                std::vector<double> logits = dense(batch[b], p.dense_w, p.dense_b);
                std::vector<double> probs = softmax(logits);
                Tensor t(1, 1, probs.size());
                t.data = probs;
                out[b] = std::move(t);
                if (trace) trace->logits.push_back(std::move(logits));
            }
            break;
        }
    }
    if (trace) trace->inputs = std::move(batch);
    return out;
}

} // namespace

std::vector<std::vector<double>> forward_batch(Network& net, const std::vector<Tensor>& batch,
                                               Rng* rng, ForwardTrace* trace) {
    if (batch.empty()) throw UsageError("forward_batch: empty batch");
    for (const Tensor& t : batch) {
        if (t.rows != net.spec.input_rows || t.cols != net.spec.input_cols || t.depth != 1) {
            throw ShapeError("forward: window shape " + t.shape_str() + " does not match spec " +
                             Tensor(net.spec.input_rows, net.spec.input_cols, 1).shape_str());
        }
    }
    std::vector<Tensor> cur = batch;
    if (trace) trace->layers.resize(net.spec.layers.size());
    for (std::size_t li = 0; li < net.spec.layers.size(); ++li) {
        cur = step_layer(net, li, std::move(cur), net.mode, rng,
                         trace ? &trace->layers[li] : nullptr);
    }
    std::vector<std::vector<double>> probs(cur.size());
    for (std::size_t b = 0; b < cur.size(); ++b) probs[b] = cur[b].data;
    if (trace) trace->probs = probs;
    return probs;
}

std::vector<double> forward(const Network& net, const Tensor& window, Rng* rng) {
    // Single-window pass; batchnorm always reads running statistics here.
    Network& mutable_net = const_cast<Network&>(net);
    const NetMode saved = mutable_net.mode;
    std::vector<std::vector<double>> probs;
    if (saved == NetMode::Train) {
        // Keep dropout active but leave batchnorm in inference statistics.
        std::vector<Tensor> batch{window};
        std::vector<Tensor> cur = std::move(batch);
        for (std::size_t li = 0; li < net.spec.layers.size(); ++li) {
            const NetMode layer_mode = net.spec.layers[li].kind == LayerKind::BatchNorm
                                           ? NetMode::Infer
                                           : NetMode::Train;
            cur = step_layer(mutable_net, li, std::move(cur), layer_mode, rng, nullptr);
        }
        return cur[0].data;
    }
    if (window.rows != net.spec.input_rows || window.cols != net.spec.input_cols ||
        window.depth != 1) {
        throw ShapeError("forward: window shape " + window.shape_str() + " does not match spec " +
                         Tensor(net.spec.input_rows, net.spec.input_cols, 1).shape_str());
    }
    std::vector<Tensor> cur{window};
    for (std::size_t li = 0; li < net.spec.layers.size(); ++li) {
        cur = step_layer(mutable_net, li, std::move(cur), NetMode::Infer, rng, nullptr);
    }
    return cur[0].data;
}

NetworkGrads make_zero_grads(const Network& net) {
    NetworkGrads grads;
    grads.layers.resize(net.params.size());
    for (std::size_t li = 0; li < net.params.size(); ++li) {
        const LayerParams& p = net.params[li];
        LayerGrads& g = grads.layers[li];
        g.filters.weights.assign(p.filters.weights.size(), 0.0);
        g.filters.biases.assign(p.filters.biases.size(), 0.0);
        g.fire_squeeze.weights.assign(p.fire_squeeze.weights.size(), 0.0);
        g.fire_squeeze.biases.assign(p.fire_squeeze.biases.size(), 0.0);
        g.fire_expand1.weights.assign(p.fire_expand1.weights.size(), 0.0);
        g.fire_expand1.biases.assign(p.fire_expand1.biases.size(), 0.0);
        g.fire_expand_t.weights.assign(p.fire_expand_t.weights.size(), 0.0);
        g.fire_expand_t.biases.assign(p.fire_expand_t.biases.size(), 0.0);
        g.dense_w.assign(p.dense_w.size(), 0.0);
        g.dense_b.assign(p.dense_b.size(), 0.0);
        g.bn_scale.assign(p.bn_scale.size(), 0.0);
        g.bn_shift.assign(p.bn_shift.size(), 0.0);
    }
    return grads;
}

double backward_batch(const Network& net, const ForwardTrace& trace,
                      const std::vector<std::size_t>& labels, NetworkGrads& grads) {
    const std::size_t batch_size = trace.probs.size();
    if (labels.size() != batch_size) {
        throw UsageError("backward_batch: label count does not match batch");
    }
    const double inv_b = 1.0 / static_cast<double>(batch_size);

    double loss = 0.0;
    for (std::size_t b = 0; b < batch_size; ++b) {
        if (labels[b] >= net.spec.num_classes) {
            throw UsageError("backward_batch: label out of range");
        }
        loss += cross_entropy(trace.probs[b], labels[b]);
    }
    loss *= inv_b;

    // Upstream gradients flowing into each layer, one tensor per sample.
    std::vector<Tensor> up(batch_size);

    for (std::size_t li = net.spec.layers.size(); li-- > 0;) {
        const LayerSpec& layer = net.spec.layers[li];
        const LayerParams& p = net.params[li];
        const LayerTrace& lt = trace.layers[li];
        LayerGrads& g = grads.layers[li];

        switch (layer.kind) {
            case LayerKind::DenseSoftmax: {
                for (std::size_t b = 0; b < batch_size; ++b) {
                    std::vector<double> dlogits = trace.probs[b];
                    dlogits[labels[b]] -= 1.0;
                    for (double& v : dlogits) v *= inv_b;
                    DenseGradients dg = dense_backward(lt.inputs[b], p.dense_w, p.dense_b, dlogits);
                    add_scaled(g.dense_w, dg.weight_grad);
                    add_scaled(g.dense_b, dg.bias_grad);
                    up[b] = std::move(dg.input_grad);
                }
                break;
            }
            case LayerKind::TemporalConv:
            case LayerKind::SpatialReduction: {
                const Padding padding =
                    layer.kind == LayerKind::TemporalConv ? layer.padding : Padding::Valid;
                for (std::size_t b = 0; b < batch_size; ++b) {
                    if (layer.lrelu) {
                        const Tensor& pre = lt.preact[b];
                        for (std::size_t i = 0; i < up[b].data.size(); ++i) {
                            up[b].data[i] *= lrelu_slope(pre.data[i], layer.alpha);
                        }
                    }
                    ConvGradients cg = conv2d_backward(lt.inputs[b], p.filters, up[b], padding);
                    add_scaled(g.filters.weights, cg.filter_grad.weights);
                    add_scaled(g.filters.biases, cg.filter_grad.biases);
                    up[b] = std::move(cg.input_grad);
                }
                break;
            }
            case LayerKind::Fire: {
                const std::size_t half = layer.out_depth / 2;
                for (std::size_t b = 0; b < batch_size; ++b) {
                    const Tensor& pre = lt.preact[b];
                    for (std::size_t i = 0; i < up[b].data.size(); ++i) {
                        up[b].data[i] *= lrelu_slope(pre.data[i], layer.alpha);
                    }
                    auto [g1, gt] = split_depth(up[b], half);
                    ConvGradients c1 = conv2d_backward(lt.squeeze_out[b], p.fire_expand1, g1,
                                                       Padding::Same);
                    ConvGradients ct = conv2d_backward(lt.squeeze_out[b], p.fire_expand_t, gt,
                                                       Padding::Same);
                    add_scaled(g.fire_expand1.weights, c1.filter_grad.weights);
                    add_scaled(g.fire_expand1.biases, c1.filter_grad.biases);
                    add_scaled(g.fire_expand_t.weights, ct.filter_grad.weights);
                    add_scaled(g.fire_expand_t.biases, ct.filter_grad.biases);
                    Tensor gsq = std::move(c1.input_grad);
                    for (std::size_t i = 0; i < gsq.data.size(); ++i) {
                        gsq.data[i] += ct.input_grad.data[i];
                    }
                    const Tensor& sq_pre = lt.squeeze_pre[b];
                    for (std::size_t i = 0; i < gsq.data.size(); ++i) {
                        gsq.data[i] *= lrelu_slope(sq_pre.data[i], layer.alpha);
                    }
                    ConvGradients cs = conv2d_backward(lt.inputs[b], p.fire_squeeze, gsq,
                                                       Padding::Same);
                    add_scaled(g.fire_squeeze.weights, cs.filter_grad.weights);
                    add_scaled(g.fire_squeeze.biases, cs.filter_grad.biases);
                    up[b] = std::move(cs.input_grad);
                }
                break;
            }
            case LayerKind::Dropout: {
                if (lt.dropout_mask.empty()) break;  // identity during this pass
                const double keep_scale = 1.0 / (1.0 - layer.rate);
                for (std::size_t b = 0; b < batch_size; ++b) {
                    const auto& mask = lt.dropout_mask[b];
                    for (std::size_t i = 0; i < up[b].data.size(); ++i) {
                        up[b].data[i] = mask[i] ? up[b].data[i] * keep_scale : 0.0;
                    }
                }
                break;
            }
            case LayerKind::BatchNorm: {
                const auto [rows, cols, depth] = net.shapes[li];
                const std::size_t plane = rows * cols;
                const double n = static_cast<double>(batch_size * plane);
                for (std::size_t b = 0; b < batch_size && layer.lrelu; ++b) {
                    const Tensor& pre = lt.preact[b];
                    for (std::size_t i = 0; i < up[b].data.size(); ++i) {
                        up[b].data[i] *= lrelu_slope(pre.data[i], layer.alpha);
                    }
                }
                // Per-map reductions over the whole batch.
                std::vector<double> sum_dy(depth, 0.0);
                std::vector<double> sum_dy_xhat(depth, 0.0);
                for (std::size_t b = 0; b < batch_size; ++b) {
                    const Tensor& xhat = lt.bn_xhat[b];
                    for (std::size_t px = 0; px < plane; ++px) {
                        const double* dy = &up[b].data[px * depth];
                        const double* xh = &xhat.data[px * depth];
                        for (std::size_t m = 0; m < depth; ++m) {
                            sum_dy[m] += dy[m];
                            sum_dy_xhat[m] += dy[m] * xh[m];
                        }
                    }
                }
                for (std::size_t m = 0; m < depth; ++m) {
                    g.bn_shift[m] += sum_dy[m];
                    g.bn_scale[m] += sum_dy_xhat[m];
                }
                std::vector<double> inv_std(depth);
                for (std::size_t m = 0; m < depth; ++m) {
                    inv_std[m] = 1.0 / std::sqrt(lt.bn_var[m] + net.bn_epsilon);
                }
                for (std::size_t b = 0; b < batch_size; ++b) {
                    const Tensor& xhat = lt.bn_xhat[b];
                    for (std::size_t px = 0; px < plane; ++px) {
                        double* dy = &up[b].data[px * depth];
                        const double* xh = &xhat.data[px * depth];
                        for (std::size_t m = 0; m < depth; ++m) {
                            dy[m] = p.bn_scale[m] * inv_std[m] *
                                    (dy[m] - sum_dy[m] / n - xh[m] * sum_dy_xhat[m] / n);
                        }
                    }
                }
                break;
            }
        }
    }
    return loss;
}

std::vector<std::span<double>> parameter_views(Network& net) {
    std::vector<std::span<double>> views;
    for (LayerParams& p : net.params) {
        auto push = [&views](std::vector<double>& v) {
            if (!v.empty()) views.emplace_back(v.data(), v.size());
        };
        push(p.filters.weights);
        push(p.filters.biases);
        push(p.fire_squeeze.weights);
        push(p.fire_squeeze.biases);
        push(p.fire_expand1.weights);
        push(p.fire_expand1.biases);
        push(p.fire_expand_t.weights);
        push(p.fire_expand_t.biases);
        push(p.bn_scale);
        push(p.bn_shift);
        push(p.dense_w);
        push(p.dense_b);
    }
    return views;
}

std::vector<std::span<const double>> parameter_views(const Network& net) {
    std::vector<std::span<const double>> views;
    for (const auto view : parameter_views(const_cast<Network&>(net))) {
        views.emplace_back(view.data(), view.size());
    }
    return views;
}

std::vector<std::span<const double>> gradient_views(const NetworkGrads& grads) {
    std::vector<std::span<const double>> views;
    for (const LayerGrads& g : grads.layers) {
        auto push = [&views](const std::vector<double>& v) {
            if (!v.empty()) views.emplace_back(v.data(), v.size());
        };
        push(g.filters.weights);
        push(g.filters.biases);
        push(g.fire_squeeze.weights);
        push(g.fire_squeeze.biases);
        push(g.fire_expand1.weights);
        push(g.fire_expand1.biases);
        push(g.fire_expand_t.weights);
        push(g.fire_expand_t.biases);
        push(g.bn_scale);
        push(g.bn_shift);
        push(g.dense_w);
        push(g.dense_b);
    }
    return views;
}

Tensor dropout_forward(const Tensor& input, double rate, NetMode mode, std::uint64_t rng_seed) {
    if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout: rate must be in [0,1)");
    if (mode == NetMode::Infer || rate == 0.0) return input;
    Rng rng(rng_seed);
    Tensor out = input;
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& v : out.data) {
        v = rng.uniform01() >= rate ? v * keep_scale : 0.0;
    }
    return out;
}

std::vector<Tensor> batchnorm_forward(const std::vector<Tensor>& batch, BatchNormParams& params,
                                      NetMode mode) {
    if (batch.empty()) throw UsageError("batchnorm: empty batch");
    Network shim;
    shim.bn_momentum = params.momentum;
    shim.bn_epsilon = params.epsilon;
    shim.spec.layers.push_back(LayerSpec::batchnorm(false));
    shim.shapes.push_back({batch[0].rows, batch[0].cols, batch[0].depth});
    shim.shapes.push_back({batch[0].rows, batch[0].cols, batch[0].depth});
    shim.params.resize(1);
    shim.params[0].bn_scale = params.scale;
    shim.params[0].bn_shift = params.shift;
    shim.params[0].bn_running_mean = params.running_mean;
    shim.params[0].bn_running_var = params.running_var;
    std::vector<Tensor> out = step_layer(shim, 0, batch, mode, nullptr, nullptr);
    params.running_mean = shim.params[0].bn_running_mean;
    params.running_var = shim.params[0].bn_running_var;
    return out;
}

Tensor temporal_fire_forward(const Tensor& input, const FilterBank& squeeze,
                             const FilterBank& expand1, const FilterBank& expand_t,
                             double alpha) {
    if (expand1.out_depth != expand_t.out_depth) {
        throw UsageError("fire: expand halves must have equal widths");
    }
    if (expand1.filter_cols != 1 || expand_t.filter_cols != 1 || squeeze.filter_cols != 1) {
        throw UsageError("fire: filters may only span the temporal direction");
    }
    Tensor sq = lrelu_tensor(conv2d(input, squeeze, Padding::Same), alpha);
    Tensor e1 = conv2d(sq, expand1, Padding::Same);
    Tensor et = conv2d(sq, expand_t, Padding::Same);
    return lrelu_tensor(concat_depth(e1, et), alpha);
}

Tensor spatial_reduction_forward(const Tensor& input, const FilterBank& filters, double alpha) {
    if (filters.filter_cols != input.cols) {
        throw UsageError("spatial reduction: filter_cols " + std::to_string(filters.filter_cols) +
                         " must span all " + std::to_string(input.cols) + " channels");
    }
    if (filters.out_depth != 2) {
        throw UsageError("spatial reduction: exactly 2 filters required");
    }
    return lrelu_tensor(conv2d(input, filters, Padding::Valid), alpha);
}

std::string network_spec_to_json(const NetworkSpec& spec) {
    nlohmann::ordered_json j;
    j["input_rows"] = spec.input_rows;
    j["input_cols"] = spec.input_cols;
    j["num_classes"] = spec.num_classes;
    j["layers"] = nlohmann::ordered_json::array();
    for (const LayerSpec& l : spec.layers) {
        nlohmann::ordered_json jl;
        jl["kind"] = to_string(l.kind);
        jl["filter_rows"] = l.filter_rows;
        jl["filter_cols"] = l.filter_cols;
        jl["out_depth"] = l.out_depth;
        jl["squeeze_depth"] = l.squeeze_depth;
        jl["expand_temporal_rows"] = l.expand_temporal_rows;
        jl["rate"] = l.rate;
        jl["alpha"] = l.alpha;
        jl["padding"] = l.padding == Padding::Same ? "same" : "valid";
        jl["lrelu"] = l.lrelu;
        j["layers"].push_back(jl);
    }
    return j.dump();
}

NetworkSpec network_spec_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("network spec: invalid JSON: ") + e.what());
    }
    NetworkSpec spec;
    spec.input_rows = j.at("input_rows").get<std::size_t>();
    spec.input_cols = j.at("input_cols").get<std::size_t>();
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    for (const auto& jl : j.at("layers")) {
        LayerSpec l;
        l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
        l.filter_rows = jl.at("filter_rows").get<std::size_t>();
        l.filter_cols = jl.at("filter_cols").get<std::size_t>();
        l.out_depth = jl.at("out_depth").get<std::size_t>();
        l.squeeze_depth = jl.at("squeeze_depth").get<std::size_t>();
        l.expand_temporal_rows = jl.at("expand_temporal_rows").get<std::size_t>();
        l.rate = jl.at("rate").get<double>();
        l.alpha = jl.at("alpha").get<double>();
        l.padding = jl.at("padding").get<std::string>() == "same" ? Padding::Same : Padding::Valid;
        l.lrelu = jl.at("lrelu").get<bool>();
        spec.layers.push_back(l);
    }
    return spec;
}

void save_network(const Network& net, const std::string& path) {
    BinaryWriter w(path);
    w.write_bytes(kModelMagic, sizeof(kModelMagic));
    w.write_u32(kModelVersion);
    w.write_string(network_spec_to_json(net.spec));

    std::vector<const std::vector<double>*> arrays;
    for (const LayerParams& p : net.params) {
        for (const auto* v : {&p.filters.weights, &p.filters.biases, &p.fire_squeeze.weights,
                              &p.fire_squeeze.biases, &p.fire_expand1.weights,
                              &p.fire_expand1.biases, &p.fire_expand_t.weights,
                              &p.fire_expand_t.biases, &p.bn_scale, &p.bn_shift,
                              &p.bn_running_mean, &p.bn_running_var, &p.dense_w, &p.dense_b}) {
            if (!v->empty()) arrays.push_back(v);
        }
    }
    std::uint64_t total = 0;
    for (const auto* v : arrays) total += v->size();
    w.write_u64(total);
    for (const auto* v : arrays) w.write_f64_array(*v);
    w.finish();
}

Network load_network(const std::string& path) {
    BinaryReader r(path);
    char magic[8];
    r.read_bytes(magic, sizeof(magic));
    if (std::memcmp(magic, kModelMagic, sizeof(magic)) != 0) {
        throw DataError("'" + path + "' is not a network model file");
    }
    const std::uint32_t version = r.read_u32();
    if (version != kModelVersion) {
        throw DataError("unsupported network model version " + std::to_string(version));
    }
    Network net = build_network(network_spec_from_json(r.read_string()), 0);

    std::vector<std::vector<double>*> arrays;
    for (LayerParams& p : net.params) {
        for (auto* v : {&p.filters.weights, &p.filters.biases, &p.fire_squeeze.weights,
                        &p.fire_squeeze.biases, &p.fire_expand1.weights, &p.fire_expand1.biases,
                        &p.fire_expand_t.weights, &p.fire_expand_t.biases, &p.bn_scale,
                        &p.bn_shift, &p.bn_running_mean, &p.bn_running_var, &p.dense_w,
                        &p.dense_b}) {
            if (!v->empty()) arrays.push_back(v);
        }
    }
    std::uint64_t total = 0;
    for (const auto* v : arrays) total += v->size();
    if (r.read_u64() != total) {
        throw DataError("network model '" + path + "' has unexpected parameter count");
    }
    for (auto* v : arrays) r.read_f64_array(*v);
    return net;
}

} // namespace emgnet
