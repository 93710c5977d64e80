#pragma once

// Shared fixtures and independent oracles for the test suites. Everything in
// here is test-only; the oracles deliberately avoid the library's own code
// paths (straightforward loops, explicit inverses, finite differences) so
// that agreement is evidence rather than tautology.

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "preddiff/image.hpp"
#include "preddiff/imaging.hpp"
#include "preddiff/network.hpp"
#include "preddiff/patch_model.hpp"

namespace testsupport {

using namespace preddiff;

// ---------------------------------------------------------------------------
// Scratch directories
// ---------------------------------------------------------------------------

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<unsigned> counter{0};
        const auto base = std::filesystem::temp_directory_path();
        path_ = base / ("preddiff_" + tag + "_" + std::to_string(::getpid()) + "_" +
                        std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline bool exactly_equal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

// ---------------------------------------------------------------------------
// Image generators
// ---------------------------------------------------------------------------

inline Image uniform_random_image(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t c,
                                  double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Image img(h, w, c);
    for (double& v : img.data) {
        v = dist(rng);
    }
    return img;
}

// White noise smoothed by repeated 3x3 box blurs, then rescaled to [lo, hi].
// Strong local correlation with a wide per-pixel marginal, which is the
// regime the conditional patch model is designed for.
inline Image smooth_random_image(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t c,
                                 int blur_passes = 3, double lo = 0.05, double hi = 0.95) {
    Image img = uniform_random_image(rng, h, w, c);
    Image tmp = img;
    for (int pass = 0; pass < blur_passes; ++pass) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    int n = 0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            const long yy = static_cast<long>(y) + dy;
                            const long xx = static_cast<long>(x) + dx;
                            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) {
                                continue;
                            }
                            acc += img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), ch);
                            ++n;
                        }
                    }
                    tmp.at(y, x, ch) = acc / n;
                }
            }
        }
        std::swap(img.data, tmp.data);
    }
    double mn = img.data[0], mx = img.data[0];
    for (double v : img.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    const double span = mx > mn ? mx - mn : 1.0;
    for (double& v : img.data) {
        v = lo + (hi - lo) * (v - mn) / span;
    }
    return img;
}

inline std::vector<Image> smooth_image_set(std::uint64_t seed, std::size_t n, std::size_t h, std::size_t w,
                                           std::size_t c) {
    std::mt19937_64 rng(seed);
    std::vector<Image> images;
    images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        images.push_back(smooth_random_image(rng, h, w, c));
    }
    return images;
}

// ---------------------------------------------------------------------------
// Network generators
// ---------------------------------------------------------------------------

inline std::vector<double> random_weights(std::mt19937_64& rng, std::size_t n, double scale) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> w(n);
    for (double& v : w) {
        v = dist(rng);
    }
    return w;
}

inline DenseLayer random_dense(std::mt19937_64& rng, const std::string& name, std::size_t in, std::size_t out) {
    DenseLayer d;
    d.name = name;
    d.in_size = in;
    d.out_size = out;
    d.weights = random_weights(rng, in * out, 1.0 / std::sqrt(static_cast<double>(in)));
    d.biases = random_weights(rng, out, 0.1);
    return d;
}

inline ConvLayer random_conv(std::mt19937_64& rng, const std::string& name, std::size_t kh, std::size_t kw,
                             std::size_t in_c, std::size_t out_c, std::size_t stride, std::size_t pad) {
    ConvLayer c;
    c.name = name;
    c.kernel_h = kh;
    c.kernel_w = kw;
    c.in_channels = in_c;
    c.out_channels = out_c;
    c.stride = stride;
    c.padding = pad;
    c.weights = random_weights(rng, out_c * in_c * kh * kw, 1.0 / std::sqrt(static_cast<double>(in_c * kh * kw)));
    c.biases = random_weights(rng, out_c, 0.1);
    return c;
}

// conv-relu-pool-conv-relu-dense-softmax on the given input.
inline NetworkSpec random_conv_dense_net(std::uint64_t seed, const TensorShape& input, std::size_t classes) {
    std::mt19937_64 rng(seed);
    NetworkSpec net;
    net.input = input;
    net.layers.emplace_back(random_conv(rng, "conv1", 3, 3, input.channels, 4, 1, 1));
    net.layers.emplace_back(ReluLayer{"relu1"});
    net.layers.emplace_back(MaxPoolLayer{"pool1", 2, 2});
    net.layers.emplace_back(random_conv(rng, "conv2", 3, 3, 4, 6, 1, 1));
    net.layers.emplace_back(ReluLayer{"relu2"});
    const std::size_t flat = (input.height / 2) * (input.width / 2) * 6;
    net.layers.emplace_back(random_dense(rng, "fc", flat, classes));
    net.layers.emplace_back(SoftmaxLayer{"probs"});
    net.validate();
    return net;
}

// Two-class logistic classifier over a flat input: logit_1 = w.x + b,
// logit_0 = 0.
inline NetworkSpec logistic_net(const TensorShape& input, const std::vector<double>& weights, double bias) {
    NetworkSpec net;
    net.input = input;
    DenseLayer d;
    d.name = "logits";
    d.in_size = input.size();
    d.out_size = 2;
    d.weights.assign(2 * d.in_size, 0.0);
    for (std::size_t i = 0; i < d.in_size; ++i) {
        d.weights[d.in_size + i] = weights[i];  // class 1 row
    }
    d.biases = {0.0, bias};
    net.layers.emplace_back(std::move(d));
    net.layers.emplace_back(SoftmaxLayer{"probs"});
    net.validate();
    return net;
}

// ---------------------------------------------------------------------------
// Independent forward reference (golden oracle for the classifier)
// ---------------------------------------------------------------------------

namespace reference {

// Plain, layer-by-layer evaluation with long double accumulators and loop
// nests written independently of the library implementation. Returns the
// output of every layer up to (excluding) the softmax; the last entry holds
// the logits.
inline std::vector<std::vector<double>> forward_activations(const NetworkSpec& net, const Image& x) {
    std::vector<std::vector<double>> all;
    std::vector<double> cur = x.data;
    TensorShape shape{x.height, x.width, x.channels};
    for (std::size_t li = 0; li + 1 < net.layers.size(); ++li) {  // stop before softmax
        const Layer& layer = net.layers[li];
        if (const auto* d = std::get_if<DenseLayer>(&layer)) {
            std::vector<double> out(d->out_size);
            for (std::size_t o = 0; o < d->out_size; ++o) {
                long double acc = d->biases[o];
                for (std::size_t i = 0; i < d->in_size; ++i) {
                    acc += static_cast<long double>(d->weights[o * d->in_size + i]) * cur[i];
                }
                out[o] = static_cast<double>(acc);
            }
            cur = out;
            shape = TensorShape{1, 1, d->out_size};
        } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
            const long H = static_cast<long>(shape.height);
            const long W = static_cast<long>(shape.width);
            const std::size_t oh = (shape.height + 2 * c->padding - c->kernel_h) / c->stride + 1;
            const std::size_t ow = (shape.width + 2 * c->padding - c->kernel_w) / c->stride + 1;
            std::vector<double> out(oh * ow * c->out_channels, 0.0);
            for (std::size_t oc = 0; oc < c->out_channels; ++oc) {
                for (std::size_t ic = 0; ic < c->in_channels; ++ic) {
                    for (std::size_t ky = 0; ky < c->kernel_h; ++ky) {
                        for (std::size_t kx = 0; kx < c->kernel_w; ++kx) {
                            const double wv =
                                c->weights[((oc * c->in_channels + ic) * c->kernel_h + ky) * c->kernel_w + kx];
                            for (std::size_t oy = 0; oy < oh; ++oy) {
                                const long iy = static_cast<long>(oy * c->stride + ky) -
                                                static_cast<long>(c->padding);
                                if (iy < 0 || iy >= H) continue;
                                for (std::size_t ox = 0; ox < ow; ++ox) {
                                    const long ix = static_cast<long>(ox * c->stride + kx) -
                                                    static_cast<long>(c->padding);
                                    if (ix < 0 || ix >= W) continue;
                                    out[(oy * ow + ox) * c->out_channels + oc] +=
                                        wv * cur[(static_cast<std::size_t>(iy) * shape.width +
                                                  static_cast<std::size_t>(ix)) * shape.channels + ic];
                                }
                            }
                        }
                    }
                }
                for (std::size_t i = 0; i < oh * ow; ++i) {
                    out[i * c->out_channels + oc] += c->biases[oc];
                }
            }
            cur = out;
            shape = TensorShape{oh, ow, c->out_channels};
        } else if (std::get_if<ReluLayer>(&layer)) {
            for (double& v : cur) {
                if (v < 0.0) v = 0.0;
            }
        } else if (const auto* m = std::get_if<MaxPoolLayer>(&layer)) {
            const std::size_t oh = (shape.height - m->window) / m->stride + 1;
            const std::size_t ow = (shape.width - m->window) / m->stride + 1;
            std::vector<double> out(oh * ow * shape.channels);
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    for (std::size_t ch = 0; ch < shape.channels; ++ch) {
                        double best = cur[(oy * m->stride * shape.width + ox * m->stride) * shape.channels + ch];
                        for (std::size_t ky = 0; ky < m->window; ++ky) {
                            for (std::size_t kx = 0; kx < m->window; ++kx) {
                                best = std::max(best, cur[((oy * m->stride + ky) * shape.width + ox * m->stride +
                                                           kx) * shape.channels + ch]);
                            }
                        }
                        out[(oy * ow + ox) * shape.channels + ch] = best;
                    }
                }
            }
            cur = out;
            shape = TensorShape{oh, ow, shape.channels};
        }
        all.push_back(cur);
    }
    return all;
}

inline std::vector<double> forward_logits(const NetworkSpec& net, const Image& x) {
    return forward_activations(net, x).back();
}

}  // namespace reference

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

inline std::vector<double> fd_logit_gradient(const NetworkSpec& net, const Image& x, std::size_t class_index,
                                             double step = 1e-4) {
    std::vector<double> grad(x.size());
    Image probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe.data[i];
        probe.data[i] = orig + step;
        const double up = forward(net, probe).logits[class_index];
        probe.data[i] = orig - step;
        const double down = forward(net, probe).logits[class_index];
        probe.data[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

// ---------------------------------------------------------------------------
// Dense-inverse Gaussian conditioning oracle
// ---------------------------------------------------------------------------

// Gauss-Jordan elimination with partial pivoting; independent of any
// factorization used by the implementation.
inline Eigen::MatrixXd gauss_jordan_inverse(Eigen::MatrixXd a) {
    const Eigen::Index n = a.rows();
    Eigen::MatrixXd inv = Eigen::MatrixXd::Identity(n, n);
    for (Eigen::Index col = 0; col < n; ++col) {
        Eigen::Index pivot = col;
        for (Eigen::Index r = col + 1; r < n; ++r) {
            if (std::abs(a(r, col)) > std::abs(a(pivot, col))) {
                pivot = r;
            }
        }
        a.row(col).swap(a.row(pivot));
        inv.row(col).swap(inv.row(pivot));
        const double p = a(col, col);
        a.row(col) /= p;
        inv.row(col) /= p;
        for (Eigen::Index r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a(r, col);
            if (f != 0.0) {
                a.row(r) -= f * a.row(col);
                inv.row(r) -= f * inv.row(col);
            }
        }
    }
    return inv;
}

struct ConditioningOracle {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
};

inline ConditioningOracle condition_oracle(const GaussianPatchModel& model, const Eigen::VectorXd& outer_values,
                                           const std::vector<std::size_t>& inner) {
    const std::size_t dim = model.geometry.patch_dim();
    std::vector<char> is_inner(dim, 0);
    for (std::size_t i : inner) {
        is_inner[i] = 1;
    }
    std::vector<std::size_t> obs;
    for (std::size_t i = 0; i < dim; ++i) {
        if (!is_inner[i]) obs.push_back(i);
    }
    const auto ii = static_cast<Eigen::Index>(inner.size());
    const auto oo = static_cast<Eigen::Index>(obs.size());
    Eigen::VectorXd mu_i(ii), mu_o(oo), x_o(oo);
    Eigen::MatrixXd s_ii(ii, ii), s_io(ii, oo), s_oo(oo, oo);
    for (Eigen::Index a = 0; a < ii; ++a) {
        mu_i(a) = model.mean(static_cast<Eigen::Index>(inner[static_cast<std::size_t>(a)]));
        for (Eigen::Index b = 0; b < ii; ++b) {
            s_ii(a, b) = model.covariance(static_cast<Eigen::Index>(inner[static_cast<std::size_t>(a)]),
                                          static_cast<Eigen::Index>(inner[static_cast<std::size_t>(b)]));
        }
        for (Eigen::Index b = 0; b < oo; ++b) {
            s_io(a, b) = model.covariance(static_cast<Eigen::Index>(inner[static_cast<std::size_t>(a)]),
                                          static_cast<Eigen::Index>(obs[static_cast<std::size_t>(b)]));
        }
    }
    for (Eigen::Index a = 0; a < oo; ++a) {
        mu_o(a) = model.mean(static_cast<Eigen::Index>(obs[static_cast<std::size_t>(a)]));
        x_o(a) = outer_values(static_cast<Eigen::Index>(obs[static_cast<std::size_t>(a)]));
        for (Eigen::Index b = 0; b < oo; ++b) {
            s_oo(a, b) = model.covariance(static_cast<Eigen::Index>(obs[static_cast<std::size_t>(a)]),
                                          static_cast<Eigen::Index>(obs[static_cast<std::size_t>(b)]));
        }
    }
    s_oo.diagonal().array() += model.epsilon;
    const Eigen::MatrixXd s_oo_inv = gauss_jordan_inverse(s_oo);
    ConditioningOracle oracle;
    oracle.mean = mu_i + s_io * s_oo_inv * (x_o - mu_o);
    oracle.covariance = s_ii - s_io * s_oo_inv * s_io.transpose();
    return oracle;
}

// Random well-conditioned SPD patch model (eigenvalues in [0.1, 2]).
inline GaussianPatchModel random_spd_model(std::mt19937_64& rng, const PatchGeometry& geometry,
                                           double epsilon = 0.0) {
    const auto dim = static_cast<Eigen::Index>(geometry.patch_dim());
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> eig(0.1, 2.0);
    Eigen::MatrixXd a(dim, dim);
    for (Eigen::Index r = 0; r < dim; ++r) {
        for (Eigen::Index c = 0; c < dim; ++c) {
            a(r, c) = normal(rng);
        }
    }
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
    Eigen::VectorXd lambda(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
        lambda(i) = eig(rng);
    }
    GaussianPatchModel model;
    model.geometry = geometry;
    model.epsilon = epsilon;
    model.fit_count = 2;
    model.covariance = q * lambda.asDiagonal() * q.transpose();
    model.covariance = ((model.covariance + model.covariance.transpose()) * 0.5).eval();
    model.mean.resize(dim);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (Eigen::Index i = 0; i < dim; ++i) {
        model.mean(i) = unif(rng);
    }
    return model;
}

// ---------------------------------------------------------------------------
// Receptive-field oracle (from layer geometry, not from the forward pass)
// ---------------------------------------------------------------------------

struct PixelBox {
    long y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open, clipped to the image

    bool contains(std::size_t y, std::size_t x) const {
        return static_cast<long>(y) >= y0 && static_cast<long>(y) < y1 && static_cast<long>(x) >= x0 &&
               static_cast<long>(x) < x1;
    }
    PixelBox dilated(long d, std::size_t height, std::size_t width) const {
        return PixelBox{std::max(0L, y0 - d), std::max(0L, x0 - d),
                        std::min(static_cast<long>(height), y1 + d),
                        std::min(static_cast<long>(width), x1 + d)};
    }
};

// Input pixels that can influence unit (out_y, out_x) of a first-layer
// convolution.
inline PixelBox conv_receptive_field(const ConvLayer& conv, std::size_t out_y, std::size_t out_x,
                                     std::size_t height, std::size_t width) {
    const long y0 = static_cast<long>(out_y * conv.stride) - static_cast<long>(conv.padding);
    const long x0 = static_cast<long>(out_x * conv.stride) - static_cast<long>(conv.padding);
    PixelBox box{y0, x0, y0 + static_cast<long>(conv.kernel_h), x0 + static_cast<long>(conv.kernel_w)};
    return box.dilated(0, height, width);
}

// ---------------------------------------------------------------------------
// Planted-evidence construction: a two-class classifier whose class-1 logit
// depends only on a known square region R. The region carries high-frequency
// texture aligned with the weights, the rest of the image is smooth, so
// removing R content destroys the class evidence.
// ---------------------------------------------------------------------------

struct PlantedSetup {
    Image image;             // 28 x 28 x 1
    NetworkSpec net;
    std::size_t region_y = 10, region_x = 10, region_size = 8;

    PixelBox region_box() const {
        return PixelBox{static_cast<long>(region_y), static_cast<long>(region_x),
                        static_cast<long>(region_y + region_size), static_cast<long>(region_x + region_size)};
    }
};

inline PlantedSetup make_planted_setup(std::uint64_t seed) {
    PlantedSetup setup;
    const std::size_t h = 28, w = 28;
    std::mt19937_64 rng(seed);
    setup.image = smooth_random_image(rng, h, w, 1, 4, 0.35, 0.65);

    std::uniform_real_distribution<double> amp(0.25, 0.35);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> weights(h * w, 0.0);
    const double gain = 0.55;
    double logit = 0.0;
    for (std::size_t r = 0; r < setup.region_size; ++r) {
        for (std::size_t c = 0; c < setup.region_size; ++c) {
            const std::size_t y = setup.region_y + r;
            const std::size_t x = setup.region_x + c;
            const double sign = coin(rng) ? 1.0 : -1.0;
            const double value = std::clamp(0.5 + sign * amp(rng), 0.0, 1.0);
            setup.image.at(y, x, 0) = value;
            weights[y * w + x] = sign * gain;
            logit += sign * gain * value;
        }
    }
    // Bias so the unperturbed class-1 probability sits near 0.9: responsive
    // but not saturated.
    const double bias = 2.2 - logit;
    setup.net = logistic_net(TensorShape{h, w, 1}, weights, bias);
    return setup;
}

// Fraction of total |score| mass lying outside `box`.
inline double mass_fraction_outside(const RelevanceMap& map, const PixelBox& box) {
    double inside = 0.0, outside = 0.0;
    for (std::size_t y = 0; y < map.height; ++y) {
        for (std::size_t x = 0; x < map.width; ++x) {
            const double m = std::abs(map.scores[y * map.width + x]);
            (box.contains(y, x) ? inside : outside) += m;
        }
    }
    const double total = inside + outside;
    return total > 0.0 ? outside / total : 0.0;
}

}  // namespace testsupport
