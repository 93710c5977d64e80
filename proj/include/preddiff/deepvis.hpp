#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "preddiff/errors.hpp"
#include "preddiff/relevance.hpp"
#include "preddiff/rng.hpp"

namespace preddiff {

// Result of analyzing one convolutional feature map: the per-unit maps were
// averaged pointwise over `unit_count` units.
struct FeatureMapReport {
    std::string layer;
    std::size_t map_index = 0;
    std::size_t unit_count = 0;
    std::optional<std::uint64_t> subsample_seed;
    std::vector<std::size_t> units;          // flat indices into the layer output
    std::vector<RelevanceMap> unit_maps;     // retained only on request
    RelevanceMap averaged;
};

// Relevance of the input pixels for one scalar unit, measured as activation
// difference.
inline RelevanceMap unit_relevance(const NetworkSpec& net, const Image& x, const LayerTap& tap,
                                   const PerturbationSource& source, const ExplainConfig& cfg,
                                   unsigned workers = 0) {
    if (tap.select != LayerTap::Select::unit) {
        throw ValidationError("unit_relevance: tap must address a single unit");
    }
    validate_tap(net, tap);
    ExplainConfig c = cfg;
    c.target = Target::unit(tap.layer, tap.index);
    return explain(net, x, source, c, workers);
}

// Per-unit relevance for every unit of one convolutional feature map (or a
// seeded uniform subsample), averaged pointwise. All units share each
// perturbed forward pass, so the cost is that of a single-unit analysis.
inline FeatureMapReport feature_map_relevance(const NetworkSpec& net, const Image& x, const std::string& layer,
                                              std::size_t map_index, const PerturbationSource& source,
                                              const ExplainConfig& cfg,
                                              std::optional<std::size_t> subsample = std::nullopt,
                                              unsigned workers = 0, bool keep_unit_maps = false) {
    const int li = net.layer_index(layer);
    if (li < 0) {
        throw ValidationError("feature_map_relevance: unknown layer '" + layer + "'");
    }
    if (!std::holds_alternative<ConvLayer>(net.layers[static_cast<std::size_t>(li)])) {
        throw ValidationError("feature_map_relevance: layer '" + layer + "' is not convolutional");
    }
    const TensorShape& shape = net.shapes[static_cast<std::size_t>(li)];
    if (map_index >= shape.channels) {
        throw ValidationError("feature_map_relevance: feature map " + std::to_string(map_index) +
                              " out of range (" + std::to_string(shape.channels) + " maps)");
    }

    FeatureMapReport report;
    report.layer = layer;
    report.map_index = map_index;

    std::vector<std::size_t> units;
    units.reserve(shape.height * shape.width);
    for (std::size_t y = 0; y < shape.height; ++y) {
        for (std::size_t xcol = 0; xcol < shape.width; ++xcol) {
            units.push_back((y * shape.width + xcol) * shape.channels + map_index);
        }
    }
    if (subsample && *subsample < units.size()) {
        // Seeded partial Fisher-Yates, then ascending order for stable output.
        RandomStream stream(cfg.seed, RandomStream::kDomainSubsample, map_index);
        for (std::size_t i = 0; i < *subsample; ++i) {
            const std::size_t j = i + stream.next_below(units.size() - i);
            std::swap(units[i], units[j]);
        }
        units.resize(*subsample);
        std::sort(units.begin(), units.end());
        report.subsample_seed = cfg.seed;
    }
    report.units = units;
    report.unit_count = units.size();

    std::vector<Target> targets;
    targets.reserve(units.size());
    for (std::size_t u : units) {
        targets.push_back(Target::unit(layer, u));
    }
    std::vector<RelevanceMap> maps = explain_targets(net, x, source, cfg, targets, workers);

    RelevanceMap avg = maps.front();
    for (std::size_t m = 1; m < maps.size(); ++m) {
        for (std::size_t i = 0; i < avg.scores.size(); ++i) {
            avg.scores[i] += maps[m].scores[i];
        }
    }
    const double n = static_cast<double>(maps.size());
    for (double& v : avg.scores) {
        v /= n;
    }
    avg.config.target = Target::unit(layer, map_index);  // the map as a whole
    report.averaged = std::move(avg);
    if (keep_unit_maps) {
        report.unit_maps = std::move(maps);
    }
    return report;
}

// Sidecar: flat key=value lines next to the averaged relevance-map file.
inline void save_feature_map_sidecar(const std::string& path, const FeatureMapReport& report) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out << "layer=" << report.layer << "\n";
    out << "map_index=" << report.map_index << "\n";
    out << "unit_count=" << report.unit_count << "\n";
    if (report.subsample_seed) {
        out << "subsample_seed=" << *report.subsample_seed << "\n";
    }
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

}  // namespace preddiff
