#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "preddiff/errors.hpp"
#include "preddiff/image.hpp"
#include "preddiff/network.hpp"
#include "preddiff/network_io.hpp"
#include "preddiff/patch_model.hpp"
#include "preddiff/rng.hpp"

namespace preddiff {

// ---------------------------------------------------------------------------
// Relevance measures
// ---------------------------------------------------------------------------

// odds(p) = p / (1 - p). p = 1 is rejected; correct first if it can occur.
inline double odds(double p) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw ValidationError("odds: probability " + std::to_string(p) + " outside [0,1)");
    }
    return p / (1.0 - p);
}

// Smoothing p <- (p*N + 1) / (N + K); keeps probabilities strictly inside
// (0,1) so the odds are always defined. N is the training-set size, K the
// class count. 1/K is a fixed point.
inline double laplace_correct(double p, std::uint64_t train_count, std::uint32_t class_count) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw ValidationError("laplace_correct: probability " + std::to_string(p) + " outside [0,1]");
    }
    if (train_count < 1 || class_count < 2) {
        throw ValidationError("laplace_correct: need N >= 1 and K >= 2");
    }
    return (p * static_cast<double>(train_count) + 1.0) /
           (static_cast<double>(train_count) + static_cast<double>(class_count));
}

struct LaplaceParams {
    std::uint64_t train_count = 10000;
    std::uint32_t class_count = 2;
};

// log2 odds(p_full) - log2 odds(p_removed), optionally Laplace-correcting
// both probabilities first. Positive means the feature was evidence for the
// class, negative means evidence against it.
inline double weight_of_evidence(double p_full, double p_removed,
                                 const std::optional<LaplaceParams>& laplace = std::nullopt) {
    if (laplace) {
        p_full = laplace_correct(p_full, laplace->train_count, laplace->class_count);
        p_removed = laplace_correct(p_removed, laplace->train_count, laplace->class_count);
    } else if (p_full <= 0.0 || p_full >= 1.0 || p_removed <= 0.0 || p_removed >= 1.0) {
        throw ValidationError("weight_of_evidence: raw 0/1 probability; enable Laplace correction");
    }
    return std::log2(odds(p_full)) - std::log2(odds(p_removed));
}

// g(z|h) - g(z|h\i): the measure for targets that are not probabilities
// (logits, hidden units). Negative means removal increased the activation.
inline double activation_difference(double g_full, double g_removed) {
    return g_full - g_removed;
}

// ---------------------------------------------------------------------------
// Configuration and result types
// ---------------------------------------------------------------------------

enum class TargetKind : std::uint8_t { probability = 0, logit = 1, unit = 2 };
enum class SamplerKind : std::uint8_t { conditional = 0, marginal = 1 };
enum class Measure : std::uint8_t { weight_of_evidence = 0, activation_difference = 1 };

// What the analysis explains: a class probability, a class logit, or one
// scalar unit anywhere in the network.
struct Target {
    TargetKind kind = TargetKind::probability;
    std::size_t class_index = 0;  // probability / logit
    std::string layer;            // unit
    std::size_t unit_index = 0;   // unit (flat index into the layer output)

    static Target probability(std::size_t c) { return Target{TargetKind::probability, c, {}, 0}; }
    static Target logit(std::size_t c) { return Target{TargetKind::logit, c, {}, 0}; }
    static Target unit(std::string layer, std::size_t index) {
        return Target{TargetKind::unit, 0, std::move(layer), index};
    }
};

// Probability targets are measured as weight of evidence; logits and hidden
// units are not probabilities, so they get the activation difference.
inline Measure measure_for(const Target& target) {
    return target.kind == TargetKind::probability ? Measure::weight_of_evidence
                                                  : Measure::activation_difference;
}

struct ExplainConfig {
    std::size_t inner_size = 10;  // k
    std::size_t outer_size = 14;  // l
    std::size_t samples = 20;     // S
    Target target;
    SamplerKind sampler = SamplerKind::conditional;
    bool laplace = true;
    std::uint64_t laplace_train_count = 10000;
    std::uint32_t laplace_class_count = 2;
    std::uint64_t seed = 0;
    std::size_t stride = 1;

    void validate() const {
        if (!(outer_size > inner_size && inner_size >= 1)) {
            throw ValidationError("explain config: requires l > k >= 1");
        }
        if (samples < 1) {
            throw ValidationError("explain config: samples must be >= 1");
        }
        if (stride < 1) {
            throw ValidationError("explain config: stride must be >= 1");
        }
        if (stride > inner_size) {
            throw ValidationError("explain config: stride > k would leave uncovered pixels");
        }
        if (laplace && (laplace_train_count < 1 || laplace_class_count < 2)) {
            throw ValidationError("explain config: Laplace correction needs N >= 1 and K >= 2");
        }
    }
};

// Signed per-pixel scores (window sums divided by coverage counts).
struct RelevanceMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> scores;
    std::vector<std::uint32_t> counts;
    Measure measure = Measure::weight_of_evidence;
    ExplainConfig config;
};

// ---------------------------------------------------------------------------
// Window geometry
// ---------------------------------------------------------------------------

// Window start offsets along one axis: 0, stride, 2*stride, ... plus the
// final start n-k when the stride pattern does not land on it, so that the
// trailing pixels always stay covered.
inline std::vector<std::size_t> window_starts(std::size_t n, std::size_t k, std::size_t stride) {
    if (k > n) {
        throw ValidationError("window larger than image: k=" + std::to_string(k) + " > n=" + std::to_string(n));
    }
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s <= n - k; s += stride) {
        starts.push_back(s);
    }
    if (starts.back() != n - k) {
        starts.push_back(n - k);
    }
    return starts;
}

// Coverage count per pixel for the window grid above.
inline std::vector<std::uint32_t> window_counts(std::size_t height, std::size_t width, std::size_t k,
                                                std::size_t stride) {
    const auto ys = window_starts(height, k, stride);
    const auto xs = window_starts(width, k, stride);
    std::vector<std::uint32_t> row(width, 0), col(height, 0);
    for (std::size_t s : xs) {
        for (std::size_t i = 0; i < k; ++i) {
            ++row[s + i];
        }
    }
    for (std::size_t s : ys) {
        for (std::size_t i = 0; i < k; ++i) {
            ++col[s + i];
        }
    }
    std::vector<std::uint32_t> counts(height * width);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            counts[y * width + x] = col[y] * row[x];
        }
    }
    return counts;
}

// ---------------------------------------------------------------------------
// Perturbation sources
// ---------------------------------------------------------------------------

// Images whose blocks stand in for removed content. With exhaustive=true the
// engine walks the set in order (sample s <- source s mod n), which realizes
// an exact small discrete replacement distribution when S is a multiple of n.
struct MarginalSourceSet {
    std::vector<Image> images;
    bool exhaustive = false;
};

struct PerturbationSource {
    const GaussianPatchModel* model = nullptr;
    const MarginalSourceSet* marginal = nullptr;
};

inline PerturbationSource conditional_source(const GaussianPatchModel& model) {
    return PerturbationSource{&model, nullptr};
}

inline PerturbationSource marginal_source(const MarginalSourceSet& set) {
    return PerturbationSource{nullptr, &set};
}

// ---------------------------------------------------------------------------
// The sliding-window engine
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::VectorXd gaussian_draw(const Eigen::VectorXd& mean, const Eigen::MatrixXd& chol,
                                     RandomStream& stream) {
    Eigen::VectorXd z(mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        z(i) = stream.next_gaussian();
    }
    Eigen::VectorXd v = mean + chol * z;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        v(i) = std::clamp(v(i), 0.0, 1.0);
    }
    return v;
}

// Outer-patch placement: centered on the inner window, shifted inward when it
// would cross the image border, so it always contains the window.
inline std::size_t outer_origin(std::size_t window_start, std::size_t k, std::size_t l, std::size_t n) {
    const std::size_t margin = (l - k) / 2;
    std::size_t origin = window_start > margin ? window_start - margin : 0;
    if (origin + l > n) {
        origin = n - l;
    }
    return origin;
}

inline Eigen::VectorXd patch_vector(const Image& x, std::size_t top, std::size_t left, std::size_t l) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(l * l * x.channels));
    Eigen::Index d = 0;
    for (std::size_t r = 0; r < l; ++r) {
        for (std::size_t c = 0; c < l; ++c) {
            for (std::size_t ch = 0; ch < x.channels; ++ch) {
                v(d++) = x.at(top + r, left + c, ch);
            }
        }
    }
    return v;
}

inline void paste_window(Image& x, std::size_t top, std::size_t left, std::size_t k,
                         const Eigen::VectorXd& values) {
    Eigen::Index d = 0;
    for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t ch = 0; ch < x.channels; ++ch) {
                x.at(top + r, left + c, ch) = values(d++);
            }
        }
    }
}

inline double target_value(const Target& target, const ClassifierOutput& out,
                           const std::vector<std::vector<double>>& tapped, int tap_index) {
    switch (target.kind) {
        case TargetKind::probability:
            return out.probabilities[target.class_index];
        case TargetKind::logit:
            return out.logits[target.class_index];
        case TargetKind::unit:
        default:
            return tapped[static_cast<std::size_t>(tap_index)][0];
    }
}

}  // namespace detail

// Multi-target sliding-window analysis. All targets share every perturbed
// forward pass, so requesting more targets does not change the samples or
// any individual result. Work is split across `workers` threads
// (0 = hardware concurrency); the output is bit-identical for any worker
// count because per-window sample streams are derived from
// (seed, window row, window column) and windows are merged in row-major
// order by a single thread.
inline std::vector<RelevanceMap> explain_targets(const NetworkSpec& net, const Image& x,
                                                 const PerturbationSource& source, const ExplainConfig& cfg,
                                                 const std::vector<Target>& targets, unsigned workers = 0) {
    cfg.validate();
    if (targets.empty()) {
        throw ValidationError("explain: no targets");
    }
    const TensorShape image_shape{x.height, x.width, x.channels};
    if (!(image_shape == net.input)) {
        throw ValidationError("explain: image shape " + image_shape.str() + " does not match network input " +
                              net.input.str());
    }
    const std::size_t k = cfg.inner_size;
    const std::size_t l = cfg.outer_size;
    if (k > x.height || k > x.width) {
        throw ValidationError("explain: window k=" + std::to_string(k) + " larger than image");
    }

    // Resolve targets and the taps they need.
    std::vector<LayerTap> taps;
    std::vector<int> tap_of_target(targets.size(), -1);
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const Target& target = targets[t];
        if (target.kind == TargetKind::unit) {
            LayerTap tap{target.layer, LayerTap::Select::unit, target.unit_index};
            validate_tap(net, tap);
            tap_of_target[t] = static_cast<int>(taps.size());
            taps.push_back(std::move(tap));
        } else if (target.class_index >= net.class_count()) {
            throw ValidationError("explain: class " + std::to_string(target.class_index) + " out of range (" +
                                  std::to_string(net.class_count()) + " classes)");
        }
    }

    const std::optional<LaplaceParams> laplace =
        cfg.laplace ? std::optional<LaplaceParams>(LaplaceParams{cfg.laplace_train_count, cfg.laplace_class_count})
                    : std::nullopt;

    // Sampler-specific setup.
    const bool conditional = cfg.sampler == SamplerKind::conditional;
    std::vector<ConditionalFamily> families;
    std::vector<int> family_of_offset;  // (dr * (l-k+1) + dc) -> index into families
    if (conditional) {
        if (source.model == nullptr) {
            throw ValidationError("explain: conditional sampler needs a patch model");
        }
        const GaussianPatchModel& model = *source.model;
        if (model.geometry.inner != k || model.geometry.outer != l || model.geometry.channels != x.channels) {
            throw ValidationError("explain: patch model geometry k=" + std::to_string(model.geometry.inner) +
                                  " l=" + std::to_string(model.geometry.outer) + " C=" +
                                  std::to_string(model.geometry.channels) + " does not match config/image");
        }
        if (model.mean.size() != static_cast<Eigen::Index>(model.geometry.patch_dim())) {
            throw ValidationError("explain: patch model dimension does not match its geometry");
        }
        if (l > x.height || l > x.width) {
            throw ValidationError("explain: outer patch l=" + std::to_string(l) + " larger than image");
        }
    } else {
        if (source.marginal == nullptr || source.marginal->images.empty()) {
            throw ValidationError("explain: marginal sampler needs a non-empty source image set");
        }
        for (const Image& img : source.marginal->images) {
            if (img.height < x.height || img.width < x.width || img.channels != x.channels) {
                throw ValidationError("explain: marginal source image smaller than the input or channel mismatch");
            }
        }
    }

    const std::vector<std::size_t> starts_y = window_starts(x.height, k, cfg.stride);
    const std::vector<std::size_t> starts_x = window_starts(x.width, k, cfg.stride);
    const std::size_t n_windows = starts_y.size() * starts_x.size();
    const std::size_t n_targets = targets.size();

    if (conditional) {
        // One conditional family per distinct inner-block offset.
        const std::size_t span = l - k + 1;
        family_of_offset.assign(span * span, -1);
        for (std::size_t wy : starts_y) {
            const std::size_t oy = detail::outer_origin(wy, k, l, x.height);
            for (std::size_t wx : starts_x) {
                const std::size_t ox = detail::outer_origin(wx, k, l, x.width);
                const std::size_t key = (wy - oy) * span + (wx - ox);
                if (family_of_offset[key] < 0) {
                    family_of_offset[key] = static_cast<int>(families.size());
                    families.emplace_back(*source.model,
                                          inner_index_set(source.model->geometry, wy - oy, wx - ox));
                }
            }
        }
    }

    // Unperturbed target values.
    const auto [full_out, full_taps] = forward_with_taps(net, x, taps);
    std::vector<double> full_values(n_targets);
    for (std::size_t t = 0; t < n_targets; ++t) {
        full_values[t] = detail::target_value(targets[t], full_out, full_taps, tap_of_target[t]);
    }

    // Per-window scores into disjoint slots; any thread may compute any
    // window because the sample stream depends only on the window position.
    std::vector<double> window_scores(n_windows * n_targets, 0.0);
    std::atomic<std::size_t> next_window{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;

    auto worker_loop = [&]() {
        Image perturbed = x;
        std::vector<double> sums(n_targets);
        try {
            for (;;) {
                const std::size_t widx = next_window.fetch_add(1);
                if (widx >= n_windows) {
                    break;
                }
                const std::size_t wy = starts_y[widx / starts_x.size()];
                const std::size_t wx = starts_x[widx % starts_x.size()];
                RandomStream stream(cfg.seed, RandomStream::kDomainWindow,
                                    (static_cast<std::uint64_t>(wy) << 32) | wx);

                std::vector<Eigen::VectorXd> draws;
                if (conditional) {
                    const std::size_t oy = detail::outer_origin(wy, k, l, x.height);
                    const std::size_t ox = detail::outer_origin(wx, k, l, x.width);
                    const std::size_t span = l - k + 1;
                    const ConditionalFamily& family =
                        families[static_cast<std::size_t>(family_of_offset[(wy - oy) * span + (wx - ox)])];
                    const Eigen::VectorXd observed = detail::patch_vector(x, oy, ox, l);
                    const Eigen::VectorXd mean = family.conditional_mean(observed);
                    draws.reserve(cfg.samples);
                    for (std::size_t s = 0; s < cfg.samples; ++s) {
                        draws.push_back(detail::gaussian_draw(mean, family.chol(), stream));
                    }
                } else {
                    draws = sample_marginal(source.marginal->images, wy, wx, k, cfg.samples, stream,
                                            source.marginal->exhaustive);
                }

                // Probability targets accumulate the sampled probabilities
                // (the removed-feature estimate is their mean, then measured
                // as weight of evidence). Activation-difference targets
                // accumulate per-sample differences, whose mean is the same
                // estimator and is exactly zero when a perturbation cannot
                // reach the target.
                std::fill(sums.begin(), sums.end(), 0.0);
                for (const Eigen::VectorXd& draw : draws) {
                    detail::paste_window(perturbed, wy, wx, k, draw);
                    const auto [out, tapped] = forward_with_taps(net, perturbed, taps);
                    for (std::size_t t = 0; t < n_targets; ++t) {
                        const double value = detail::target_value(targets[t], out, tapped, tap_of_target[t]);
                        sums[t] += targets[t].kind == TargetKind::probability ? value : full_values[t] - value;
                    }
                }
                // Restore the original window content.
                detail::paste_window(perturbed, wy, wx, k, detail::patch_vector(x, wy, wx, k));

                for (std::size_t t = 0; t < n_targets; ++t) {
                    const double mean = sums[t] / static_cast<double>(cfg.samples);
                    window_scores[widx * n_targets + t] = targets[t].kind == TargetKind::probability
                                                              ? weight_of_evidence(full_values[t], mean, laplace)
                                                              : mean;
                }
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) {
                first_error = std::current_exception();
            }
            next_window.store(n_windows);  // stop the other workers
        }
    };

    unsigned n_workers = workers > 0 ? workers : std::max(1u, std::thread::hardware_concurrency());
    n_workers = static_cast<unsigned>(std::min<std::size_t>(n_workers, n_windows));
    if (n_workers <= 1) {
        worker_loop();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(n_workers);
        for (unsigned i = 0; i < n_workers; ++i) {
            pool.emplace_back(worker_loop);
        }
        for (std::thread& th : pool) {
            th.join();
        }
    }
    if (first_error) {
        std::rethrow_exception(first_error);
    }

    // Deterministic merge: row-major window order, then pointwise divide.
    const std::vector<std::uint32_t> counts = window_counts(x.height, x.width, k, cfg.stride);
    std::vector<RelevanceMap> maps(n_targets);
    for (std::size_t t = 0; t < n_targets; ++t) {
        maps[t].height = x.height;
        maps[t].width = x.width;
        maps[t].scores.assign(x.height * x.width, 0.0);
        maps[t].counts = counts;
        maps[t].measure = measure_for(targets[t]);
        maps[t].config = cfg;
        maps[t].config.target = targets[t];
    }
    for (std::size_t widx = 0; widx < n_windows; ++widx) {
        const std::size_t wy = starts_y[widx / starts_x.size()];
        const std::size_t wx = starts_x[widx % starts_x.size()];
        for (std::size_t t = 0; t < n_targets; ++t) {
            const double score = window_scores[widx * n_targets + t];
            for (std::size_t r = 0; r < k; ++r) {
                double* row = &maps[t].scores[(wy + r) * x.width + wx];
                for (std::size_t c = 0; c < k; ++c) {
                    row[c] += score;
                }
            }
        }
    }
    for (std::size_t t = 0; t < n_targets; ++t) {
        for (std::size_t i = 0; i < maps[t].scores.size(); ++i) {
            maps[t].scores[i] /= static_cast<double>(counts[i]);
        }
    }
    return maps;
}

inline RelevanceMap explain(const NetworkSpec& net, const Image& x, const PerturbationSource& source,
                            const ExplainConfig& cfg, unsigned workers = 0) {
    return std::move(explain_targets(net, x, source, cfg, {cfg.target}, workers).front());
}

// ---------------------------------------------------------------------------
// Relevance-map file format ("PDRM"): spatial dims, measure tag, the full
// config echo, then raw f64 scores and u32 counts, little-endian.
// ---------------------------------------------------------------------------

namespace detail {
constexpr char kMapMagic[4] = {'P', 'D', 'R', 'M'};
}

inline void save_relevance_map(const std::string& path, const RelevanceMap& map) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out.write(detail::kMapMagic, 4);
    wire::put_u32(out, static_cast<std::uint32_t>(map.height));
    wire::put_u32(out, static_cast<std::uint32_t>(map.width));
    out.put(static_cast<char>(map.measure));
    const ExplainConfig& c = map.config;
    wire::put_u32(out, static_cast<std::uint32_t>(c.inner_size));
    wire::put_u32(out, static_cast<std::uint32_t>(c.outer_size));
    wire::put_u32(out, static_cast<std::uint32_t>(c.samples));
    out.put(static_cast<char>(c.target.kind));
    wire::put_u32(out, static_cast<std::uint32_t>(c.target.class_index));
    wire::put_string(out, c.target.layer);
    wire::put_u64(out, c.target.unit_index);
    out.put(static_cast<char>(c.sampler));
    out.put(c.laplace ? 1 : 0);
    wire::put_u64(out, c.laplace_train_count);
    wire::put_u32(out, c.laplace_class_count);
    wire::put_u64(out, c.seed);
    wire::put_u32(out, static_cast<std::uint32_t>(c.stride));
    for (double v : map.scores) {
        wire::put_f64(out, v);
    }
    for (std::uint32_t v : map.counts) {
        wire::put_u32(out, v);
    }
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

inline RelevanceMap load_relevance_map(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    char magic[4] = {0, 0, 0, 0};
    in.read(magic, 4);
    if (!in || !std::equal(magic, magic + 4, detail::kMapMagic)) {
        throw FormatError("bad magic, not a relevance map file: " + path);
    }
    RelevanceMap map;
    map.height = wire::get_u32(in, "height");
    map.width = wire::get_u32(in, "width");
    map.measure = static_cast<Measure>(in.get());
    ExplainConfig& c = map.config;
    c.inner_size = wire::get_u32(in, "k");
    c.outer_size = wire::get_u32(in, "l");
    c.samples = wire::get_u32(in, "samples");
    c.target.kind = static_cast<TargetKind>(in.get());
    c.target.class_index = wire::get_u32(in, "class index");
    c.target.layer = wire::get_string(in, "target layer");
    c.target.unit_index = wire::get_u64(in, "unit index");
    c.sampler = static_cast<SamplerKind>(in.get());
    c.laplace = in.get() != 0;
    c.laplace_train_count = wire::get_u64(in, "laplace N");
    c.laplace_class_count = wire::get_u32(in, "laplace K");
    c.seed = wire::get_u64(in, "seed");
    c.stride = wire::get_u32(in, "stride");
    const std::size_t n = map.height * map.width;
    map.scores.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        map.scores[i] = wire::get_f64(in, "scores");
    }
    map.counts.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        map.counts[i] = wire::get_u32(in, "counts");
    }
    return map;
}

}  // namespace preddiff
