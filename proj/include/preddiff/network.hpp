#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "preddiff/errors.hpp"
#include "preddiff/image.hpp"

namespace preddiff {

// Shape of a layer activation. Dense outputs are (1, 1, n).
struct TensorShape {
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t channels = 1;

    std::size_t size() const { return height * width * channels; }
    bool operator==(const TensorShape&) const = default;

    std::string str() const {
        return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
    }
};

// weights[o*in_size + i], biases[o]
struct DenseLayer {
    std::string name;
    std::size_t in_size = 0;
    std::size_t out_size = 0;
    std::vector<double> weights;
    std::vector<double> biases;
};

// Zero padding, square stride. weights[((oc*in_channels + ic)*kernel_h + ky)*kernel_w + kx]
struct ConvLayer {
    std::string name;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::vector<double> weights;
    std::vector<double> biases;
};

struct ReluLayer {
    std::string name;
};

// Per-channel max over a square window, no padding.
struct MaxPoolLayer {
    std::string name;
    std::size_t window = 2;
    std::size_t stride = 2;
};

struct SoftmaxLayer {
    std::string name;
};

using Layer = std::variant<DenseLayer, ConvLayer, ReluLayer, MaxPoolLayer, SoftmaxLayer>;

inline const std::string& layer_name(const Layer& layer) {
    return std::visit([](const auto& l) -> const std::string& { return l.name; }, layer);
}

// A loaded feed-forward classifier. Immutable after validate(); forward
// passes share it freely across threads.
struct NetworkSpec {
    TensorShape input;
    std::uint32_t train_count = 10000;  // training-set size declared for Laplace smoothing
    std::vector<Layer> layers;

    // Output shape per layer, filled by validate().
    std::vector<TensorShape> shapes;

    std::size_t class_count() const { return shapes.empty() ? 0 : shapes.back().size(); }

    int layer_index(const std::string& name) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layer_name(layers[i]) == name) {
                return static_cast<int>(i);
            }
        }
        return -1;
    }

    // Checks adjacent-shape compatibility and the single-terminal-softmax rule.
    // Throws ValidationError naming the first offending layer.
    void validate() {
        if (layers.empty()) {
            throw ValidationError("network: no layers");
        }
        if (input.size() == 0) {
            throw ValidationError("network: empty input shape");
        }
        shapes.clear();
        shapes.reserve(layers.size());
        TensorShape cur = input;
        std::size_t softmax_count = 0;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string where = "layer " + std::to_string(i) + " (" + layer_name(layers[i]) + ")";
            if (const auto* d = std::get_if<DenseLayer>(&layers[i])) {
                if (d->in_size == 0 || d->out_size == 0) {
                    throw ValidationError(where + ": zero-sized dense layer");
                }
                if (cur.size() != d->in_size) {
                    throw ValidationError(where + ": input size " + std::to_string(d->in_size) +
                                          " does not match incoming " + cur.str());
                }
                if (d->weights.size() != d->in_size * d->out_size || d->biases.size() != d->out_size) {
                    throw ValidationError(where + ": weight/bias array sizes do not match shape");
                }
                cur = TensorShape{1, 1, d->out_size};
            } else if (const auto* c = std::get_if<ConvLayer>(&layers[i])) {
                if (c->kernel_h == 0 || c->kernel_w == 0 || c->stride == 0 || c->out_channels == 0) {
                    throw ValidationError(where + ": degenerate convolution geometry");
                }
                if (cur.channels != c->in_channels) {
                    throw ValidationError(where + ": expects " + std::to_string(c->in_channels) +
                                          " input channels, incoming " + cur.str());
                }
                const std::size_t padded_h = cur.height + 2 * c->padding;
                const std::size_t padded_w = cur.width + 2 * c->padding;
                if (padded_h < c->kernel_h || padded_w < c->kernel_w) {
                    throw ValidationError(where + ": kernel larger than padded input " + cur.str());
                }
                if (c->weights.size() != c->out_channels * c->in_channels * c->kernel_h * c->kernel_w ||
                    c->biases.size() != c->out_channels) {
                    throw ValidationError(where + ": weight/bias array sizes do not match shape");
                }
                cur = TensorShape{(padded_h - c->kernel_h) / c->stride + 1,
                                  (padded_w - c->kernel_w) / c->stride + 1, c->out_channels};
            } else if (std::get_if<ReluLayer>(&layers[i])) {
                // shape preserved
            } else if (const auto* m = std::get_if<MaxPoolLayer>(&layers[i])) {
                if (m->window == 0 || m->stride == 0) {
                    throw ValidationError(where + ": degenerate pooling geometry");
                }
                if (cur.height < m->window || cur.width < m->window) {
                    throw ValidationError(where + ": window larger than incoming " + cur.str());
                }
                cur = TensorShape{(cur.height - m->window) / m->stride + 1,
                                  (cur.width - m->window) / m->stride + 1, cur.channels};
            } else if (std::get_if<SoftmaxLayer>(&layers[i])) {
                ++softmax_count;
                if (i + 1 != layers.size()) {
                    throw ValidationError(where + ": softmax must be the terminal layer");
                }
                if (cur.size() < 2) {
                    throw ValidationError(where + ": softmax needs at least 2 classes");
                }
                cur = TensorShape{1, 1, cur.size()};
            }
            shapes.push_back(cur);
        }
        if (softmax_count != 1) {
            throw ValidationError("network: exactly one terminal softmax layer required, found " +
                                  std::to_string(softmax_count));
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
            for (std::size_t j = i + 1; j < layers.size(); ++j) {
                if (layer_name(layers[i]) == layer_name(layers[j])) {
                    throw ValidationError("network: duplicate layer name '" + layer_name(layers[i]) + "'");
                }
            }
        }
    }
};

// Pre-softmax class scores and the matching softmax probabilities.
struct ClassifierOutput {
    std::vector<double> logits;
    std::vector<double> probabilities;
};

// Addresses intermediate activations: one flat unit, or one whole feature
// map of a convolutional layer.
struct LayerTap {
    enum class Select { unit, feature_map };
    std::string layer;
    Select select = Select::unit;
    std::size_t index = 0;
};

struct SensitivityMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;
};

namespace detail {

inline void dense_forward(const DenseLayer& l, const std::vector<double>& in, std::vector<double>& out) {
    out.assign(l.out_size, 0.0);
    for (std::size_t o = 0; o < l.out_size; ++o) {
        double acc = l.biases[o];
        const double* w = &l.weights[o * l.in_size];
        for (std::size_t i = 0; i < l.in_size; ++i) {
            acc += w[i] * in[i];
        }
        out[o] = acc;
    }
}

inline void conv_forward(const ConvLayer& l, const TensorShape& in_shape, const std::vector<double>& in,
                         const TensorShape& out_shape, std::vector<double>& out) {
    out.assign(out_shape.size(), 0.0);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(l.padding);
    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(in_shape.height);
    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(in_shape.width);
    for (std::size_t oy = 0; oy < out_shape.height; ++oy) {
        for (std::size_t ox = 0; ox < out_shape.width; ++ox) {
            for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
                double acc = l.biases[oc];
                for (std::size_t ky = 0; ky < l.kernel_h; ++ky) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * l.stride + ky) - pad;
                    if (y < 0 || y >= ih) continue;
                    for (std::size_t kx = 0; kx < l.kernel_w; ++kx) {
                        const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * l.stride + kx) - pad;
                        if (x < 0 || x >= iw) continue;
                        const double* px = &in[(static_cast<std::size_t>(y) * in_shape.width +
                                                static_cast<std::size_t>(x)) * in_shape.channels];
                        const double* w = &l.weights[((oc * l.in_channels) * l.kernel_h + ky) * l.kernel_w + kx];
                        const std::size_t wstep = l.kernel_h * l.kernel_w;
                        for (std::size_t ic = 0; ic < l.in_channels; ++ic) {
                            acc += w[ic * wstep] * px[ic];
                        }
                    }
                }
                out[(oy * out_shape.width + ox) * l.out_channels + oc] = acc;
            }
        }
    }
}

inline void maxpool_forward(const MaxPoolLayer& l, const TensorShape& in_shape, const std::vector<double>& in,
                            const TensorShape& out_shape, std::vector<double>& out) {
    out.assign(out_shape.size(), 0.0);
    for (std::size_t oy = 0; oy < out_shape.height; ++oy) {
        for (std::size_t ox = 0; ox < out_shape.width; ++ox) {
            for (std::size_t c = 0; c < in_shape.channels; ++c) {
                double best = -std::numeric_limits<double>::infinity();
                for (std::size_t ky = 0; ky < l.window; ++ky) {
                    for (std::size_t kx = 0; kx < l.window; ++kx) {
                        const std::size_t y = oy * l.stride + ky;
                        const std::size_t x = ox * l.stride + kx;
                        best = std::max(best, in[(y * in_shape.width + x) * in_shape.channels + c]);
                    }
                }
                out[(oy * out_shape.width + ox) * in_shape.channels + c] = best;
            }
        }
    }
}

// Max-logit subtraction keeps exp() in range; the shift cancels exactly in
// the normalized result.
inline void softmax_forward(const std::vector<double>& in, std::vector<double>& out) {
    const double m = *std::max_element(in.begin(), in.end());
    out.resize(in.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = std::exp(in[i] - m);
        sum += out[i];
    }
    for (double& v : out) {
        v /= sum;
    }
}

}  // namespace detail

// Runs the full stack and returns the output of every layer,
// activations[i] = output of layers[i].
inline std::vector<std::vector<double>> forward_all(const NetworkSpec& net, const Image& x) {
    if (net.shapes.size() != net.layers.size()) {
        throw ValidationError("network: not validated");
    }
    const TensorShape in_shape{x.height, x.width, x.channels};
    if (!(in_shape == net.input)) {
        throw ValidationError("forward: image shape " + in_shape.str() + " does not match network input " +
                              net.input.str());
    }
    std::vector<std::vector<double>> acts(net.layers.size());
    const std::vector<double>* cur = &x.data;
    TensorShape cur_shape = net.input;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Layer& layer = net.layers[i];
        if (const auto* d = std::get_if<DenseLayer>(&layer)) {
            detail::dense_forward(*d, *cur, acts[i]);
        } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
            detail::conv_forward(*c, cur_shape, *cur, net.shapes[i], acts[i]);
        } else if (std::get_if<ReluLayer>(&layer)) {
            acts[i] = *cur;
            for (double& v : acts[i]) {
                v = v > 0.0 ? v : 0.0;
            }
        } else if (const auto* m = std::get_if<MaxPoolLayer>(&layer)) {
            detail::maxpool_forward(*m, cur_shape, *cur, net.shapes[i], acts[i]);
        } else {
            detail::softmax_forward(*cur, acts[i]);
        }
        cur = &acts[i];
        cur_shape = net.shapes[i];
    }
    return acts;
}

inline ClassifierOutput output_from_activations(const NetworkSpec& net,
                                                const std::vector<std::vector<double>>& acts) {
    ClassifierOutput out;
    out.probabilities = acts.back();
    out.logits = acts.size() >= 2 ? acts[acts.size() - 2] : std::vector<double>{};
    return out;
}

inline ClassifierOutput forward(const NetworkSpec& net, const Image& x) {
    return output_from_activations(net, forward_all(net, x));
}

inline void validate_tap(const NetworkSpec& net, const LayerTap& tap) {
    const int li = net.layer_index(tap.layer);
    if (li < 0) {
        throw ValidationError("tap: unknown layer '" + tap.layer + "'");
    }
    const TensorShape& shape = net.shapes[static_cast<std::size_t>(li)];
    if (tap.select == LayerTap::Select::unit) {
        if (tap.index >= shape.size()) {
            throw ValidationError("tap: unit " + std::to_string(tap.index) + " out of range for layer '" +
                                  tap.layer + "' of size " + std::to_string(shape.size()));
        }
    } else {
        if (!std::holds_alternative<ConvLayer>(net.layers[static_cast<std::size_t>(li)])) {
            throw ValidationError("tap: layer '" + tap.layer + "' is not convolutional");
        }
        if (tap.index >= shape.channels) {
            throw ValidationError("tap: feature map " + std::to_string(tap.index) +
                                  " out of range for layer '" + tap.layer + "' with " +
                                  std::to_string(shape.channels) + " maps");
        }
    }
}

inline std::vector<double> read_tap(const NetworkSpec& net, const std::vector<std::vector<double>>& acts,
                                    const LayerTap& tap) {
    const auto li = static_cast<std::size_t>(net.layer_index(tap.layer));
    const std::vector<double>& a = acts[li];
    if (tap.select == LayerTap::Select::unit) {
        return {a[tap.index]};
    }
    const TensorShape& shape = net.shapes[li];
    std::vector<double> map(shape.height * shape.width);
    for (std::size_t i = 0; i < map.size(); ++i) {
        map[i] = a[i * shape.channels + tap.index];
    }
    return map;
}

// Identical output to forward(); additionally returns the activations
// addressed by each tap (a single value for unit taps, a full spatial map
// for feature-map taps).
inline std::pair<ClassifierOutput, std::vector<std::vector<double>>> forward_with_taps(
    const NetworkSpec& net, const Image& x, const std::vector<LayerTap>& taps) {
    for (const LayerTap& tap : taps) {
        validate_tap(net, tap);
    }
    const auto acts = forward_all(net, x);
    std::vector<std::vector<double>> tapped;
    tapped.reserve(taps.size());
    for (const LayerTap& tap : taps) {
        tapped.push_back(read_tap(net, acts, tap));
    }
    return {output_from_activations(net, acts), std::move(tapped)};
}

// Multi-input forward pass; results are positionally identical to calling
// forward_with_taps on each image.
inline std::vector<std::pair<ClassifierOutput, std::vector<std::vector<double>>>> forward_with_taps_batch(
    const NetworkSpec& net, const std::vector<Image>& batch, const std::vector<LayerTap>& taps) {
    std::vector<std::pair<ClassifierOutput, std::vector<std::vector<double>>>> out;
    out.reserve(batch.size());
    for (const Image& x : batch) {
        out.push_back(forward_with_taps(net, x, taps));
    }
    return out;
}

namespace detail {

inline void dense_backward(const DenseLayer& l, const std::vector<double>& gout, std::vector<double>& gin) {
    gin.assign(l.in_size, 0.0);
    for (std::size_t o = 0; o < l.out_size; ++o) {
        const double g = gout[o];
        if (g == 0.0) continue;
        const double* w = &l.weights[o * l.in_size];
        for (std::size_t i = 0; i < l.in_size; ++i) {
            gin[i] += w[i] * g;
        }
    }
}

inline void conv_backward(const ConvLayer& l, const TensorShape& in_shape, const TensorShape& out_shape,
                          const std::vector<double>& gout, std::vector<double>& gin) {
    gin.assign(in_shape.size(), 0.0);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(l.padding);
    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(in_shape.height);
    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(in_shape.width);
    for (std::size_t oy = 0; oy < out_shape.height; ++oy) {
        for (std::size_t ox = 0; ox < out_shape.width; ++ox) {
            for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
                const double g = gout[(oy * out_shape.width + ox) * l.out_channels + oc];
                if (g == 0.0) continue;
                for (std::size_t ky = 0; ky < l.kernel_h; ++ky) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * l.stride + ky) - pad;
                    if (y < 0 || y >= ih) continue;
                    for (std::size_t kx = 0; kx < l.kernel_w; ++kx) {
                        const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * l.stride + kx) - pad;
                        if (x < 0 || x >= iw) continue;
                        double* px = &gin[(static_cast<std::size_t>(y) * in_shape.width +
                                           static_cast<std::size_t>(x)) * in_shape.channels];
                        const double* w = &l.weights[((oc * l.in_channels) * l.kernel_h + ky) * l.kernel_w + kx];
                        const std::size_t wstep = l.kernel_h * l.kernel_w;
                        for (std::size_t ic = 0; ic < l.in_channels; ++ic) {
                            px[ic] += w[ic * wstep] * g;
                        }
                    }
                }
            }
        }
    }
}

// Gradient is routed to the first maximum in scan order; ties at the exact
// maximum pick the earliest element.
inline void maxpool_backward(const MaxPoolLayer& l, const TensorShape& in_shape, const TensorShape& out_shape,
                             const std::vector<double>& in, const std::vector<double>& gout,
                             std::vector<double>& gin) {
    gin.assign(in_shape.size(), 0.0);
    for (std::size_t oy = 0; oy < out_shape.height; ++oy) {
        for (std::size_t ox = 0; ox < out_shape.width; ++ox) {
            for (std::size_t c = 0; c < in_shape.channels; ++c) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = 0;
                for (std::size_t ky = 0; ky < l.window; ++ky) {
                    for (std::size_t kx = 0; kx < l.window; ++kx) {
                        const std::size_t y = oy * l.stride + ky;
                        const std::size_t x = ox * l.stride + kx;
                        const std::size_t idx = (y * in_shape.width + x) * in_shape.channels + c;
                        if (in[idx] > best) {
                            best = in[idx];
                            best_idx = idx;
                        }
                    }
                }
                gin[best_idx] += gout[(oy * out_shape.width + ox) * in_shape.channels + c];
            }
        }
    }
}

}  // namespace detail

// d(logit_c)/dx as a flat H*W*C tensor. Differentiates the pre-softmax
// score, so the softmax layer is skipped during the backward walk.
inline std::vector<double> logit_gradient(const NetworkSpec& net, const Image& x, std::size_t class_index) {
    if (class_index >= net.class_count()) {
        throw ValidationError("gradient: class " + std::to_string(class_index) + " out of range (" +
                              std::to_string(net.class_count()) + " classes)");
    }
    const auto acts = forward_all(net, x);
    const std::size_t last = net.layers.size() - 1;  // softmax, skipped

    std::vector<double> grad(net.shapes[last].size(), 0.0);
    grad[class_index] = 1.0;

    for (std::size_t i = last; i-- > 0;) {
        const std::vector<double>& in = (i == 0) ? x.data : acts[i - 1];
        const TensorShape in_shape = (i == 0) ? net.input : net.shapes[i - 1];
        std::vector<double> gin;
        const Layer& layer = net.layers[i];
        if (const auto* d = std::get_if<DenseLayer>(&layer)) {
            detail::dense_backward(*d, grad, gin);
        } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
            detail::conv_backward(*c, in_shape, net.shapes[i], grad, gin);
        } else if (std::get_if<ReluLayer>(&layer)) {
            gin.assign(in.size(), 0.0);
            for (std::size_t j = 0; j < in.size(); ++j) {
                gin[j] = in[j] > 0.0 ? grad[j] : 0.0;
            }
        } else if (const auto* m = std::get_if<MaxPoolLayer>(&layer)) {
            detail::maxpool_backward(*m, in_shape, net.shapes[i], in, grad, gin);
        } else {
            throw ValidationError("gradient: softmax before terminal position");
        }
        grad = std::move(gin);
    }
    return grad;
}

// Per-pixel max over channels of |d(logit_c)/dx_i|.
inline SensitivityMap sensitivity_map(const NetworkSpec& net, const Image& x, std::size_t class_index) {
    const std::vector<double> grad = logit_gradient(net, x, class_index);
    SensitivityMap map{x.height, x.width, std::vector<double>(x.height * x.width, 0.0)};
    for (std::size_t y = 0; y < x.height; ++y) {
        for (std::size_t xcol = 0; xcol < x.width; ++xcol) {
            double best = 0.0;
            for (std::size_t c = 0; c < x.channels; ++c) {
                best = std::max(best, std::abs(grad[(y * x.width + xcol) * x.channels + c]));
            }
            map.data[y * x.width + xcol] = best;
        }
    }
    return map;
}

}  // namespace preddiff
