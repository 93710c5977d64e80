#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "preddiff/errors.hpp"
#include "preddiff/image.hpp"
#include "preddiff/network_io.hpp"  // wire helpers
#include "preddiff/rng.hpp"

namespace preddiff {

inline constexpr double kDefaultModelEpsilon = 1e-6;

// Inner window of size k, conditioning patch of size l > k, over C channels.
struct PatchGeometry {
    std::size_t inner = 1;   // k
    std::size_t outer = 2;   // l
    std::size_t channels = 1;

    std::size_t patch_dim() const { return outer * outer * channels; }
    std::size_t inner_dim() const { return inner * inner * channels; }

    void validate() const {
        if (!(outer > inner && inner >= 1)) {
            throw ValidationError("patch geometry: requires l > k >= 1, got k=" + std::to_string(inner) +
                                  " l=" + std::to_string(outer));
        }
        if (channels != 1 && channels != 3) {
            throw ValidationError("patch geometry: channels must be 1 or 3");
        }
    }
};

// Flattened l x l x C patches, one column per patch. Values inherit the
// [0,1] range of the source images.
struct PatchCorpus {
    PatchGeometry geometry;
    Eigen::MatrixXd patches;  // patch_dim x count
    std::size_t source_image_count = 0;
    // Sampling policy: positions uniform over (image, valid top-left corner).
};

// Flat index of pixel (r, c, ch) inside an l x l x C patch vector.
inline std::size_t patch_flat_index(const PatchGeometry& g, std::size_t r, std::size_t c, std::size_t ch) {
    return (r * g.outer + c) * g.channels + ch;
}

// Flat indices of the k x k x C block whose top-left corner sits at
// (row_off, col_off) inside the outer patch. Ascending order.
inline std::vector<std::size_t> inner_index_set(const PatchGeometry& g, std::size_t row_off, std::size_t col_off) {
    if (row_off + g.inner > g.outer || col_off + g.inner > g.outer) {
        throw ValidationError("inner block offset (" + std::to_string(row_off) + "," + std::to_string(col_off) +
                              ") does not fit in outer patch");
    }
    std::vector<std::size_t> idx;
    idx.reserve(g.inner_dim());
    for (std::size_t r = 0; r < g.inner; ++r) {
        for (std::size_t c = 0; c < g.inner; ++c) {
            for (std::size_t ch = 0; ch < g.channels; ++ch) {
                idx.push_back(patch_flat_index(g, row_off + r, col_off + c, ch));
            }
        }
    }
    return idx;
}

// `count` patches at uniformly random valid positions of uniformly random
// images; identical seed reproduces the corpus bit for bit.
inline PatchCorpus extract_corpus(const std::vector<Image>& images, const PatchGeometry& geometry,
                                  std::size_t count, std::uint64_t seed) {
    geometry.validate();
    if (images.empty()) {
        throw ValidationError("extract_corpus: no source images");
    }
    if (count < 1) {
        throw ValidationError("extract_corpus: count must be >= 1");
    }
    const std::size_t l = geometry.outer;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].height < l || images[i].width < l) {
            throw ValidationError("extract_corpus: image " + std::to_string(i) + " is smaller than " +
                                  std::to_string(l) + "x" + std::to_string(l));
        }
        if (images[i].channels != geometry.channels) {
            throw ValidationError("extract_corpus: image " + std::to_string(i) + " has " +
                                  std::to_string(images[i].channels) + " channels, geometry wants " +
                                  std::to_string(geometry.channels));
        }
    }
    PatchCorpus corpus;
    corpus.geometry = geometry;
    corpus.source_image_count = images.size();
    corpus.patches.resize(static_cast<Eigen::Index>(geometry.patch_dim()), static_cast<Eigen::Index>(count));
    for (std::size_t p = 0; p < count; ++p) {
        RandomStream stream(seed, RandomStream::kDomainCorpus, p);
        const Image& img = images[stream.next_below(images.size())];
        const std::size_t top = stream.next_below(img.height - l + 1);
        const std::size_t left = stream.next_below(img.width - l + 1);
        std::size_t d = 0;
        for (std::size_t r = 0; r < l; ++r) {
            for (std::size_t c = 0; c < l; ++c) {
                for (std::size_t ch = 0; ch < geometry.channels; ++ch) {
                    corpus.patches(static_cast<Eigen::Index>(d++), static_cast<Eigen::Index>(p)) =
                        img.at(top + r, left + c, ch);
                }
            }
        }
    }
    return corpus;
}

// Multivariate normal over flattened l x l x C patches, one model for all
// locations. epsilon is the diagonal loading applied before any
// factorization of the (near-singular) empirical covariance.
struct GaussianPatchModel {
    PatchGeometry geometry;
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
    double epsilon = kDefaultModelEpsilon;
    std::size_t fit_count = 0;
};

// Sample mean and sample covariance (divisor n-1). Verifies that
// covariance + epsilon*I admits a Cholesky factorization.
inline GaussianPatchModel fit_gaussian(const PatchCorpus& corpus, double epsilon = kDefaultModelEpsilon) {
    const Eigen::Index n = corpus.patches.cols();
    if (n < 2) {
        throw ValidationError("fit_gaussian: need at least 2 patches, got " + std::to_string(n));
    }
    GaussianPatchModel model;
    model.geometry = corpus.geometry;
    model.epsilon = epsilon;
    model.fit_count = static_cast<std::size_t>(n);
    model.mean = corpus.patches.rowwise().mean();
    const Eigen::MatrixXd centered = corpus.patches.colwise() - model.mean;
    model.covariance = (centered * centered.transpose()) / static_cast<double>(n - 1);
    // Exact symmetry regardless of accumulation order in the product.
    model.covariance = ((model.covariance + model.covariance.transpose()) * 0.5).eval();

    Eigen::MatrixXd loaded = model.covariance;
    loaded.diagonal().array() += epsilon;
    Eigen::LLT<Eigen::MatrixXd> llt(loaded);
    if (llt.info() != Eigen::Success) {
        throw NumericError("fit_gaussian: covariance + epsilon*I is not positive definite; increase epsilon (" +
                           std::to_string(epsilon) + ")");
    }
    return model;
}

// Conditional distribution of the inner block given the rest of the patch.
struct ConditionalGaussian {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
    Eigen::MatrixXd chol;  // lower-triangular L of (covariance + epsilon*I)
};

// The value-independent part of Gaussian conditioning for one inner-block
// offset: the regression onto the observed coordinates and the conditional
// covariance with its factor. Computing it once per offset and reusing it
// across windows is what keeps the sliding-window analysis cheap, since only
// a handful of distinct offsets ever occur.
class ConditionalFamily {
public:
    ConditionalFamily(const GaussianPatchModel& model, std::vector<std::size_t> inner_indices)
        : inner_(std::move(inner_indices)) {
        const auto dim = static_cast<std::size_t>(model.mean.size());
        if (model.covariance.rows() != model.mean.size() || model.covariance.cols() != model.mean.size()) {
            throw ValidationError("condition: covariance shape does not match the mean");
        }
        if (inner_.empty() || inner_.size() >= dim) {
            throw ValidationError("condition: inner index set must be a non-empty strict subset");
        }
        std::vector<char> is_inner(dim, 0);
        for (std::size_t idx : inner_) {
            if (idx >= dim) {
                throw ValidationError("condition: inner index " + std::to_string(idx) + " out of range");
            }
            if (is_inner[idx]) {
                throw ValidationError("condition: duplicate inner index " + std::to_string(idx));
            }
            is_inner[idx] = 1;
        }
        observed_.reserve(dim - inner_.size());
        for (std::size_t i = 0; i < dim; ++i) {
            if (!is_inner[i]) {
                observed_.push_back(i);
            }
        }

        const auto ii = static_cast<Eigen::Index>(inner_.size());
        const auto oo = static_cast<Eigen::Index>(observed_.size());
        mean_inner_.resize(ii);
        mean_observed_.resize(oo);
        Eigen::MatrixXd cov_io(ii, oo);
        Eigen::MatrixXd cov_ii(ii, ii);
        Eigen::MatrixXd cov_oo(oo, oo);
        for (Eigen::Index a = 0; a < ii; ++a) {
            mean_inner_(a) = model.mean(static_cast<Eigen::Index>(inner_[static_cast<std::size_t>(a)]));
            for (Eigen::Index b = 0; b < ii; ++b) {
                cov_ii(a, b) = model.covariance(static_cast<Eigen::Index>(inner_[static_cast<std::size_t>(a)]),
                                                static_cast<Eigen::Index>(inner_[static_cast<std::size_t>(b)]));
            }
            for (Eigen::Index b = 0; b < oo; ++b) {
                cov_io(a, b) = model.covariance(static_cast<Eigen::Index>(inner_[static_cast<std::size_t>(a)]),
                                                static_cast<Eigen::Index>(observed_[static_cast<std::size_t>(b)]));
            }
        }
        for (Eigen::Index a = 0; a < oo; ++a) {
            mean_observed_(a) = model.mean(static_cast<Eigen::Index>(observed_[static_cast<std::size_t>(a)]));
            for (Eigen::Index b = 0; b < oo; ++b) {
                cov_oo(a, b) = model.covariance(static_cast<Eigen::Index>(observed_[static_cast<std::size_t>(a)]),
                                                static_cast<Eigen::Index>(observed_[static_cast<std::size_t>(b)]));
            }
        }

        cov_oo.diagonal().array() += model.epsilon;
        Eigen::LLT<Eigen::MatrixXd> llt(cov_oo);
        if (llt.info() != Eigen::Success) {
            throw NumericError("condition: Cholesky of observed-block covariance failed; increase epsilon");
        }
        // W = cov_io * cov_oo^-1 via two triangular solves, never an inverse.
        regression_ = llt.solve(cov_io.transpose()).transpose();
        cond_cov_ = cov_ii - regression_ * cov_io.transpose();
        cond_cov_ = ((cond_cov_ + cond_cov_.transpose()) * 0.5).eval();

        Eigen::MatrixXd loaded = cond_cov_;
        loaded.diagonal().array() += model.epsilon;
        Eigen::LLT<Eigen::MatrixXd> cllt(loaded);
        if (cllt.info() != Eigen::Success) {
            throw NumericError("condition: Cholesky of conditional covariance failed; increase epsilon");
        }
        chol_ = cllt.matrixL();
    }

    // outer_values is the full l*l*C patch vector; entries at inner positions
    // are ignored.
    Eigen::VectorXd conditional_mean(const Eigen::VectorXd& outer_values) const {
        Eigen::VectorXd residual(static_cast<Eigen::Index>(observed_.size()));
        for (std::size_t i = 0; i < observed_.size(); ++i) {
            residual(static_cast<Eigen::Index>(i)) =
                outer_values(static_cast<Eigen::Index>(observed_[i])) - mean_observed_(static_cast<Eigen::Index>(i));
        }
        return mean_inner_ + regression_ * residual;
    }

    ConditionalGaussian condition(const Eigen::VectorXd& outer_values) const {
        return ConditionalGaussian{conditional_mean(outer_values), cond_cov_, chol_};
    }

    const Eigen::MatrixXd& conditional_covariance() const { return cond_cov_; }
    const Eigen::MatrixXd& chol() const { return chol_; }
    const std::vector<std::size_t>& inner_indices() const { return inner_; }
    const std::vector<std::size_t>& observed_indices() const { return observed_; }

private:
    std::vector<std::size_t> inner_;
    std::vector<std::size_t> observed_;
    Eigen::VectorXd mean_inner_;
    Eigen::VectorXd mean_observed_;
    Eigen::MatrixXd regression_;  // inner_dim x observed_dim
    Eigen::MatrixXd cond_cov_;
    Eigen::MatrixXd chol_;
};

// mu_cond = mu_i + S_io S_oo^-1 (x_o - mu_o); S_cond = S_ii - S_io S_oo^-1 S_oi.
inline ConditionalGaussian condition(const GaussianPatchModel& model, const Eigen::VectorXd& outer_values,
                                     const std::vector<std::size_t>& inner_indices) {
    if (outer_values.size() != model.mean.size()) {
        throw ValidationError("condition: outer value vector has wrong length");
    }
    return ConditionalFamily(model, inner_indices).condition(outer_values);
}

// mu + L z with z standard normal from the stream, then clamped to [0,1]
// componentwise. Identical stream state gives bit-identical samples.
inline std::vector<Eigen::VectorXd> sample_conditional(const ConditionalGaussian& cond, std::size_t samples,
                                                       RandomStream& stream) {
    if (samples < 1) {
        throw ValidationError("sample_conditional: need at least one sample");
    }
    const Eigen::Index dim = cond.mean.size();
    std::vector<Eigen::VectorXd> out;
    out.reserve(samples);
    Eigen::VectorXd z(dim);
    for (std::size_t s = 0; s < samples; ++s) {
        for (Eigen::Index i = 0; i < dim; ++i) {
            z(i) = stream.next_gaussian();
        }
        Eigen::VectorXd v = cond.mean + cond.chol * z;
        for (Eigen::Index i = 0; i < dim; ++i) {
            v(i) = std::clamp(v(i), 0.0, 1.0);
        }
        out.push_back(std::move(v));
    }
    return out;
}

// The k x k x C block at (top, left) copied from a uniformly chosen source
// image. With exhaustive=true sample s comes from source s mod n, which
// enumerates a small discrete replacement distribution exactly.
inline std::vector<Eigen::VectorXd> sample_marginal(const std::vector<Image>& sources, std::size_t top,
                                                    std::size_t left, std::size_t inner, std::size_t samples,
                                                    RandomStream& stream, bool exhaustive = false) {
    if (sources.empty()) {
        throw ValidationError("sample_marginal: no source images");
    }
    if (samples < 1) {
        throw ValidationError("sample_marginal: need at least one sample");
    }
    const std::size_t channels = sources.front().channels;
    for (const Image& img : sources) {
        if (top + inner > img.height || left + inner > img.width) {
            throw ValidationError("sample_marginal: location out of bounds for a source image");
        }
        if (img.channels != channels) {
            throw ValidationError("sample_marginal: mixed channel counts in source set");
        }
    }
    std::vector<Eigen::VectorXd> out;
    out.reserve(samples);
    for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t pick = exhaustive ? s % sources.size() : stream.next_below(sources.size());
        const Image& img = sources[pick];
        Eigen::VectorXd v(static_cast<Eigen::Index>(inner * inner * channels));
        Eigen::Index d = 0;
        for (std::size_t r = 0; r < inner; ++r) {
            for (std::size_t c = 0; c < inner; ++c) {
                for (std::size_t ch = 0; ch < channels; ++ch) {
                    v(d++) = img.at(top + r, left + c, ch);
                }
            }
        }
        out.push_back(std::move(v));
    }
    return out;
}

// Model file: magic "PDGM", u32 k/l/C, f64 epsilon, u64 fit count, then raw
// f64 mean and covariance (row-major), little-endian.
namespace detail {
constexpr char kModelMagic[4] = {'P', 'D', 'G', 'M'};
}

inline void save_patch_model(const std::string& path, const GaussianPatchModel& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out.write(detail::kModelMagic, 4);
    wire::put_u32(out, static_cast<std::uint32_t>(model.geometry.inner));
    wire::put_u32(out, static_cast<std::uint32_t>(model.geometry.outer));
    wire::put_u32(out, static_cast<std::uint32_t>(model.geometry.channels));
    wire::put_f64(out, model.epsilon);
    wire::put_u64(out, model.fit_count);
    const auto dim = static_cast<Eigen::Index>(model.geometry.patch_dim());
    for (Eigen::Index i = 0; i < dim; ++i) {
        wire::put_f64(out, model.mean(i));
    }
    for (Eigen::Index r = 0; r < dim; ++r) {
        for (Eigen::Index c = 0; c < dim; ++c) {
            wire::put_f64(out, model.covariance(r, c));
        }
    }
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

inline GaussianPatchModel load_patch_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    char magic[4] = {0, 0, 0, 0};
    in.read(magic, 4);
    if (!in || !std::equal(magic, magic + 4, detail::kModelMagic)) {
        throw FormatError("bad magic, not a patch model file: " + path);
    }
    GaussianPatchModel model;
    model.geometry.inner = wire::get_u32(in, "inner size");
    model.geometry.outer = wire::get_u32(in, "outer size");
    model.geometry.channels = wire::get_u32(in, "channels");
    model.geometry.validate();
    model.epsilon = wire::get_f64(in, "epsilon");
    model.fit_count = wire::get_u64(in, "fit count");
    const auto dim = static_cast<Eigen::Index>(model.geometry.patch_dim());
    model.mean.resize(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
        model.mean(i) = wire::get_f64(in, "mean");
    }
    model.covariance.resize(dim, dim);
    for (Eigen::Index r = 0; r < dim; ++r) {
        for (Eigen::Index c = 0; c < dim; ++c) {
            model.covariance(r, c) = wire::get_f64(in, "covariance");
        }
    }
    return model;
}

}  // namespace preddiff
