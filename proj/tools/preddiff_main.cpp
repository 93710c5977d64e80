// Command-line front end: fit a Gaussian patch model, explain a prediction,
// analyze hidden feature maps, or compute the gradient sensitivity baseline.
//
// Conventions: progress goes to stderr, a one-line JSON summary goes to
// stdout, machine-readable results go to files. Exit codes: 0 success,
// 1 validation error, 2 I/O or format error, 3 numerical failure.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "preddiff/deepvis.hpp"
#include "preddiff/digest.hpp"
#include "preddiff/imaging.hpp"
#include "preddiff/network_io.hpp"
#include "preddiff/patch_model.hpp"
#include "preddiff/relevance.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace preddiff;

namespace {

// Removes everything it tracked unless the run is marked complete, so a
// failed command never leaves partial outputs behind.
class OutputTracker {
public:
    ~OutputTracker() {
        if (committed_) {
            return;
        }
        for (const fs::path& p : paths_) {
            std::error_code ec;
            fs::remove(p, ec);
        }
    }

    void track(const fs::path& p) { paths_.push_back(p); }
    void commit() { committed_ = true; }

private:
    std::vector<fs::path> paths_;
    bool committed_ = false;
};

using Manifest = std::vector<std::pair<std::string, std::string>>;

void manifest_file_entry(Manifest& m, const std::string& key, const std::string& path) {
    m.emplace_back(key, path);
    m.emplace_back(key + ".fnv1a64", file_digest_hex(path));
}

void write_manifest(const fs::path& path, const Manifest& entries) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    for (const auto& [k, v] : entries) {
        out << k << "=" << v << "\n";
    }
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

std::vector<std::string> list_pnm_files(const std::string& dir) {
    if (!fs::is_directory(dir)) {
        throw IoError("not a directory: " + dir);
    }
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) {
            continue;
        }
        const std::string ext = entry.path().extension().string();
        if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
            files.push_back(entry.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw ValidationError("no .ppm/.pgm/.pnm images in " + dir);
    }
    return files;
}

std::vector<Image> load_images(const std::vector<std::string>& paths) {
    std::vector<Image> images;
    images.reserve(paths.size());
    for (const std::string& p : paths) {
        images.push_back(load_image(p));
        images.back().validate();
    }
    return images;
}

std::size_t resolve_class(const std::string& spec, const NetworkSpec& net, const Image& x) {
    if (spec == "auto") {
        // Fixed before any perturbation: the highest predicted class.
        const ClassifierOutput out = forward(net, x);
        return static_cast<std::size_t>(
            std::max_element(out.probabilities.begin(), out.probabilities.end()) - out.probabilities.begin());
    }
    std::size_t pos = 0;
    long long value = -1;
    try {
        value = std::stoll(spec, &pos);
    } catch (const std::exception&) {
        throw ValidationError("--class must be an integer or 'auto', got '" + spec + "'");
    }
    if (pos != spec.size() || value < 0) {
        throw ValidationError("--class must be an integer or 'auto', got '" + spec + "'");
    }
    if (static_cast<std::size_t>(value) >= net.class_count()) {
        throw ValidationError("class " + spec + " out of range: network has " +
                              std::to_string(net.class_count()) + " classes");
    }
    return static_cast<std::size_t>(value);
}

void print_summary(const json& j) {
    std::cout << j.dump() << std::endl;
}

// ---------------------------------------------------------------------------

struct FitModelArgs {
    std::string images_dir;
    std::size_t k = 10, l = 14;
    std::size_t count = 25000;
    double eps = kDefaultModelEpsilon;
    std::uint64_t seed = 0;
    std::string out;
};

int run_fit_model(const FitModelArgs& a) {
    PatchGeometry geometry{a.k, a.l, 0};
    const auto files = list_pnm_files(a.images_dir);
    const auto images = load_images(files);
    geometry.channels = images.front().channels;
    geometry.validate();

    std::cerr << "fit-model: " << images.size() << " images, " << a.count << " patches of "
              << a.l << "x" << a.l << "x" << geometry.channels << "\n";
    const PatchCorpus corpus = extract_corpus(images, geometry, a.count, a.seed);
    const GaussianPatchModel model = fit_gaussian(corpus, a.eps);

    OutputTracker tracker;
    tracker.track(a.out);
    save_patch_model(a.out, model);

    Manifest m;
    m.emplace_back("command", "fit-model");
    m.emplace_back("images_dir", a.images_dir);
    for (std::size_t i = 0; i < files.size(); ++i) {
        manifest_file_entry(m, "image." + std::to_string(i), files[i]);
    }
    m.emplace_back("k", std::to_string(a.k));
    m.emplace_back("l", std::to_string(a.l));
    m.emplace_back("channels", std::to_string(geometry.channels));
    m.emplace_back("count", std::to_string(a.count));
    m.emplace_back("eps", std::to_string(a.eps));
    m.emplace_back("seed", std::to_string(a.seed));
    manifest_file_entry(m, "output.model", a.out);
    const fs::path manifest_path = a.out + ".manifest";
    tracker.track(manifest_path);
    write_manifest(manifest_path, m);
    tracker.commit();

    std::cerr << "fit-model: fitted " << model.fit_count << " patches, geometry k=" << a.k << " l=" << a.l
              << " C=" << geometry.channels << "\n";
    print_summary(json{{"command", "fit-model"},
                       {"model", a.out},
                       {"fit_count", model.fit_count},
                       {"k", a.k},
                       {"l", a.l},
                       {"channels", geometry.channels}});
    return 0;
}

// ---------------------------------------------------------------------------

struct ExplainArgs {
    std::string net, image, model, marginal_dir;
    std::size_t k = 10, l = 14, samples = 20;
    std::string class_spec = "auto";
    std::string layer = "output";     // output | logits
    std::string sampler = "conditional";
    std::uint64_t seed = 0;
    unsigned workers = 0;
    std::string out;
    std::size_t stride = 1;
    std::string laplace = "on";
    double q = 0.99;
    double top_percent = 5.0;
};

int run_explain(const ExplainArgs& a) {
    const NetworkSpec net = load_network(a.net);
    Image x = load_image(a.image);
    x.validate();
    const std::size_t class_index = resolve_class(a.class_spec, net, x);

    if (a.layer != "output" && a.layer != "logits") {
        throw ValidationError("--layer must be 'output' or 'logits'");
    }
    if (a.sampler != "conditional" && a.sampler != "marginal") {
        throw ValidationError("--sampler must be 'conditional' or 'marginal'");
    }
    if (a.laplace != "on" && a.laplace != "off") {
        throw ValidationError("--laplace must be 'on' or 'off'");
    }

    ExplainConfig cfg;
    cfg.inner_size = a.k;
    cfg.outer_size = a.l;
    cfg.samples = a.samples;
    cfg.stride = a.stride;
    cfg.seed = a.seed;
    cfg.target = a.layer == "output" ? Target::probability(class_index) : Target::logit(class_index);
    cfg.sampler = a.sampler == "conditional" ? SamplerKind::conditional : SamplerKind::marginal;
    cfg.laplace = a.laplace == "on" && cfg.target.kind == TargetKind::probability;
    cfg.laplace_train_count = net.train_count;
    cfg.laplace_class_count = static_cast<std::uint32_t>(net.class_count());
    cfg.validate();

    GaussianPatchModel model;
    MarginalSourceSet marginal;
    PerturbationSource source;
    Manifest m;
    m.emplace_back("command", "explain");
    manifest_file_entry(m, "net", a.net);
    manifest_file_entry(m, "image", a.image);
    if (cfg.sampler == SamplerKind::conditional) {
        if (a.model.empty()) {
            throw ValidationError("--sampler conditional requires --model");
        }
        model = load_patch_model(a.model);
        if (model.geometry.inner != a.k || model.geometry.outer != a.l) {
            throw ValidationError("model geometry k=" + std::to_string(model.geometry.inner) + " l=" +
                                  std::to_string(model.geometry.outer) + " does not match --k/--l flags");
        }
        source = conditional_source(model);
        manifest_file_entry(m, "model", a.model);
    } else {
        if (a.marginal_dir.empty()) {
            throw ValidationError("--sampler marginal requires --marginal DIR");
        }
        const auto files = list_pnm_files(a.marginal_dir);
        marginal.images = load_images(files);
        source = marginal_source(marginal);
        for (std::size_t i = 0; i < files.size(); ++i) {
            manifest_file_entry(m, "marginal." + std::to_string(i), files[i]);
        }
    }

    std::cerr << "explain: image " << x.height << "x" << x.width << "x" << x.channels << ", class "
              << class_index << ", " << a.sampler << " sampler, S=" << a.samples << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    const RelevanceMap map = explain(net, x, source, cfg, a.workers);
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "explain: done in " << elapsed << " s\n";

    fs::create_directories(a.out);
    OutputTracker tracker;
    const fs::path out_dir(a.out);
    const fs::path map_path = out_dir / "relevance.pdrm";
    const fs::path heat_path = out_dir / "heatmap.ppm";
    const fs::path overlay_path = out_dir / "overlay.ppm";
    const fs::path mask_path = out_dir / "mask.ppm";
    const fs::path manifest_path = out_dir / "manifest.txt";
    tracker.track(map_path);
    save_relevance_map(map_path.string(), map);
    tracker.track(heat_path);
    save_image(heat_path.string(), render_heatmap(map, nullptr, a.q));
    tracker.track(overlay_path);
    save_image(overlay_path.string(), render_heatmap(map, &x, a.q));
    tracker.track(mask_path);
    save_ppm(mask_path.string(), mask_to_image(top_percent_mask(map, a.top_percent)));

    m.emplace_back("k", std::to_string(a.k));
    m.emplace_back("l", std::to_string(a.l));
    m.emplace_back("samples", std::to_string(a.samples));
    m.emplace_back("class", std::to_string(class_index));
    m.emplace_back("class_flag", a.class_spec);
    m.emplace_back("layer", a.layer);
    m.emplace_back("sampler", a.sampler);
    m.emplace_back("seed", std::to_string(a.seed));
    m.emplace_back("workers", std::to_string(a.workers));
    m.emplace_back("stride", std::to_string(a.stride));
    m.emplace_back("laplace", cfg.laplace ? "on" : "off");
    m.emplace_back("laplace_n", std::to_string(cfg.laplace_train_count));
    m.emplace_back("laplace_k", std::to_string(cfg.laplace_class_count));
    m.emplace_back("q", std::to_string(a.q));
    m.emplace_back("top_percent", std::to_string(a.top_percent));
    manifest_file_entry(m, "output.relevance", map_path.string());
    manifest_file_entry(m, "output.heatmap", heat_path.string());
    manifest_file_entry(m, "output.overlay", overlay_path.string());
    manifest_file_entry(m, "output.mask", mask_path.string());
    tracker.track(manifest_path);
    write_manifest(manifest_path, m);
    tracker.commit();

    print_summary(json{{"command", "explain"},
                       {"class", class_index},
                       {"windows", window_starts(x.height, a.k, a.stride).size() *
                                       window_starts(x.width, a.k, a.stride).size()},
                       {"elapsed_s", elapsed},
                       {"out", a.out}});
    return 0;
}

// ---------------------------------------------------------------------------

struct DeepvisArgs {
    std::string net, image, model;
    std::string layer;
    long long map_index = -1;
    long long unit_index = -1;
    std::size_t subsample = 0;
    std::size_t samples = 20;
    std::uint64_t seed = 0;
    unsigned workers = 0;
    std::string out;
    double q = 0.99;
};

int run_deepvis(const DeepvisArgs& a) {
    const NetworkSpec net = load_network(a.net);
    Image x = load_image(a.image);
    x.validate();
    if ((a.map_index < 0) == (a.unit_index < 0)) {
        throw ValidationError("exactly one of --map or --unit is required");
    }
    const GaussianPatchModel model = load_patch_model(a.model);

    ExplainConfig cfg;
    cfg.inner_size = model.geometry.inner;
    cfg.outer_size = model.geometry.outer;
    cfg.samples = a.samples;
    cfg.seed = a.seed;
    cfg.sampler = SamplerKind::conditional;
    cfg.laplace = false;  // activation differences
    const PerturbationSource source = conditional_source(model);

    std::cerr << "deepvis: layer '" << a.layer << "', "
              << (a.map_index >= 0 ? "feature map " + std::to_string(a.map_index)
                                   : "unit " + std::to_string(a.unit_index))
              << ", S=" << a.samples << "\n";
    const auto t0 = std::chrono::steady_clock::now();

    fs::create_directories(a.out);
    OutputTracker tracker;
    const fs::path out_dir(a.out);
    const fs::path map_path = out_dir / "relevance.pdrm";
    const fs::path heat_path = out_dir / "heatmap.ppm";
    const fs::path overlay_path = out_dir / "overlay.ppm";
    const fs::path manifest_path = out_dir / "manifest.txt";

    Manifest m;
    m.emplace_back("command", "deepvis");
    manifest_file_entry(m, "net", a.net);
    manifest_file_entry(m, "image", a.image);
    manifest_file_entry(m, "model", a.model);
    m.emplace_back("layer", a.layer);

    RelevanceMap result;
    if (a.unit_index >= 0) {
        const LayerTap tap{a.layer, LayerTap::Select::unit, static_cast<std::size_t>(a.unit_index)};
        result = unit_relevance(net, x, tap, source, cfg, a.workers);
        m.emplace_back("unit", std::to_string(a.unit_index));
    } else {
        const std::optional<std::size_t> sub =
            a.subsample > 0 ? std::optional<std::size_t>(a.subsample) : std::nullopt;
        FeatureMapReport report = feature_map_relevance(net, x, a.layer, static_cast<std::size_t>(a.map_index),
                                                        source, cfg, sub, a.workers);
        result = std::move(report.averaged);
        const fs::path sidecar_path = out_dir / "featmap.txt";
        tracker.track(sidecar_path);
        save_feature_map_sidecar(sidecar_path.string(), report);
        m.emplace_back("map", std::to_string(a.map_index));
        m.emplace_back("unit_count", std::to_string(report.unit_count));
        m.emplace_back("subsample", std::to_string(a.subsample));
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "deepvis: done in " << elapsed << " s\n";

    tracker.track(map_path);
    save_relevance_map(map_path.string(), result);
    tracker.track(heat_path);
    save_image(heat_path.string(), render_heatmap(result, nullptr, a.q));
    tracker.track(overlay_path);
    save_image(overlay_path.string(), render_heatmap(result, &x, a.q));

    m.emplace_back("k", std::to_string(cfg.inner_size));
    m.emplace_back("l", std::to_string(cfg.outer_size));
    m.emplace_back("samples", std::to_string(a.samples));
    m.emplace_back("seed", std::to_string(a.seed));
    m.emplace_back("workers", std::to_string(a.workers));
    m.emplace_back("q", std::to_string(a.q));
    manifest_file_entry(m, "output.relevance", map_path.string());
    manifest_file_entry(m, "output.heatmap", heat_path.string());
    manifest_file_entry(m, "output.overlay", overlay_path.string());
    tracker.track(manifest_path);
    write_manifest(manifest_path, m);
    tracker.commit();

    print_summary(json{{"command", "deepvis"},
                       {"layer", a.layer},
                       {"elapsed_s", elapsed},
                       {"out", a.out}});
    return 0;
}

// ---------------------------------------------------------------------------

struct SensitivityArgs {
    std::string net, image;
    std::string class_spec = "auto";
    std::string out;
    double q = 0.99;
    double top_percent = 5.0;
};

int run_sensitivity(const SensitivityArgs& a) {
    const NetworkSpec net = load_network(a.net);
    Image x = load_image(a.image);
    x.validate();
    const std::size_t class_index = resolve_class(a.class_spec, net, x);

    std::cerr << "sensitivity: class " << class_index << "\n";
    const SensitivityMap map = sensitivity_map(net, x, class_index);

    fs::create_directories(a.out);
    OutputTracker tracker;
    const fs::path out_dir(a.out);
    const fs::path heat_path = out_dir / "heatmap.ppm";
    const fs::path mask_path = out_dir / "mask.ppm";
    const fs::path manifest_path = out_dir / "manifest.txt";
    tracker.track(heat_path);
    save_image(heat_path.string(), render_heatmap(map, nullptr, a.q));
    tracker.track(mask_path);
    save_ppm(mask_path.string(), mask_to_image(top_percent_mask(map, a.top_percent)));

    Manifest m;
    m.emplace_back("command", "sensitivity");
    manifest_file_entry(m, "net", a.net);
    manifest_file_entry(m, "image", a.image);
    m.emplace_back("class", std::to_string(class_index));
    m.emplace_back("class_flag", a.class_spec);
    m.emplace_back("q", std::to_string(a.q));
    m.emplace_back("top_percent", std::to_string(a.top_percent));
    manifest_file_entry(m, "output.heatmap", heat_path.string());
    manifest_file_entry(m, "output.mask", mask_path.string());
    tracker.track(manifest_path);
    write_manifest(manifest_path, m);
    tracker.commit();

    print_summary(json{{"command", "sensitivity"}, {"class", class_index}, {"out", a.out}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prediction-difference relevance maps for small feed-forward classifiers"};
    app.require_subcommand(1);

    FitModelArgs fit;
    CLI::App* fit_cmd = app.add_subcommand("fit-model", "Fit a Gaussian patch model from an image directory");
    fit_cmd->add_option("--images", fit.images_dir, "Directory of .ppm/.pgm training images")->required();
    fit_cmd->add_option("--k", fit.k, "Inner patch size")->required();
    fit_cmd->add_option("--l", fit.l, "Outer patch size (l > k)")->required();
    fit_cmd->add_option("--count", fit.count, "Number of training patches");
    fit_cmd->add_option("--eps", fit.eps, "Diagonal regularization epsilon");
    fit_cmd->add_option("--seed", fit.seed, "Extraction seed");
    fit_cmd->add_option("--out", fit.out, "Output model file")->required();

    ExplainArgs ex;
    CLI::App* ex_cmd = app.add_subcommand("explain", "Per-pixel relevance map for one input image");
    ex_cmd->add_option("--net", ex.net, "Network weight file")->required();
    ex_cmd->add_option("--image", ex.image, "Input image (.ppm/.pgm)")->required();
    ex_cmd->add_option("--model", ex.model, "Gaussian patch model file (conditional sampling)");
    ex_cmd->add_option("--marginal", ex.marginal_dir, "Directory of source images (marginal sampling)");
    ex_cmd->add_option("--k", ex.k, "Inner window size")->required();
    ex_cmd->add_option("--l", ex.l, "Outer patch size (l > k)")->required();
    ex_cmd->add_option("--samples", ex.samples, "Samples per window");
    ex_cmd->add_option("--class", ex.class_spec, "Class index or 'auto'");
    ex_cmd->add_option("--layer", ex.layer, "Explained value: 'output' (probabilities) or 'logits'");
    ex_cmd->add_option("--sampler", ex.sampler, "'conditional' or 'marginal'");
    ex_cmd->add_option("--seed", ex.seed, "Sampling seed");
    ex_cmd->add_option("--workers", ex.workers, "Worker threads (0 = hardware)");
    ex_cmd->add_option("--out", ex.out, "Output directory")->required();
    ex_cmd->add_option("--stride", ex.stride, "Window stride");
    ex_cmd->add_option("--laplace", ex.laplace, "Laplace correction for probability targets: on|off");
    ex_cmd->add_option("--q", ex.q, "Heatmap saturation quantile");
    ex_cmd->add_option("--top-percent", ex.top_percent, "Mask percentile");

    DeepvisArgs dv;
    CLI::App* dv_cmd = app.add_subcommand("deepvis", "Relevance maps for hidden units / feature maps");
    dv_cmd->add_option("--net", dv.net, "Network weight file")->required();
    dv_cmd->add_option("--image", dv.image, "Input image")->required();
    dv_cmd->add_option("--model", dv.model, "Gaussian patch model file")->required();
    dv_cmd->add_option("--layer", dv.layer, "Layer name")->required();
    dv_cmd->add_option("--map", dv.map_index, "Feature-map index (conv layers)");
    dv_cmd->add_option("--unit", dv.unit_index, "Flat unit index");
    dv_cmd->add_option("--subsample", dv.subsample, "Analyze only this many units per map (0 = all)");
    dv_cmd->add_option("--samples", dv.samples, "Samples per window");
    dv_cmd->add_option("--seed", dv.seed, "Sampling seed");
    dv_cmd->add_option("--workers", dv.workers, "Worker threads (0 = hardware)");
    dv_cmd->add_option("--out", dv.out, "Output directory")->required();
    dv_cmd->add_option("--q", dv.q, "Heatmap saturation quantile");

    SensitivityArgs se;
    CLI::App* se_cmd = app.add_subcommand("sensitivity", "Gradient sensitivity baseline map");
    se_cmd->add_option("--net", se.net, "Network weight file")->required();
    se_cmd->add_option("--image", se.image, "Input image")->required();
    se_cmd->add_option("--class", se.class_spec, "Class index or 'auto'");
    se_cmd->add_option("--out", se.out, "Output directory")->required();
    se_cmd->add_option("--q", se.q, "Heatmap saturation quantile");
    se_cmd->add_option("--top-percent", se.top_percent, "Mask percentile");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*fit_cmd) {
            return run_fit_model(fit);
        }
        if (*ex_cmd) {
            return run_explain(ex);
        }
        if (*dv_cmd) {
            return run_deepvis(dv);
        }
        return run_sensitivity(se);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
