#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "preddiff/errors.hpp"
#include "preddiff/network.hpp"

namespace preddiff {

// Weight-file layout (binary, little-endian):
//   magic "PDN1"
//   u32 layer count
//   u32 input height, u32 input width, u32 input channels
//   u32 training-set size (Laplace N)
//   per layer: u8 kind tag, u32 name length + UTF-8 bytes,
//              kind-specific u32 shape fields,
//              raw f64 weight then bias arrays, row-major.
// Kind tags: 1 dense (in, out), 2 conv (kh, kw, in_c, out_c, stride, pad),
// 3 relu, 4 maxpool (window, stride), 5 softmax.
//
// A JSON mirror of the same fields is accepted for hand-written networks;
// the loader dispatches on the magic bytes.

namespace wire {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f64(std::ostream& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void put_f64_array(std::ostream& out, const std::vector<double>& v) {
    for (double x : v) {
        put_f64(out, x);
    }
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(std::string("truncated file reading ") + what);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& in, const char* what) {
    const std::uint64_t lo = get_u32(in, what);
    const std::uint64_t hi = get_u32(in, what);
    return lo | (hi << 32);
}

inline double get_f64(std::istream& in, const char* what) {
    return std::bit_cast<double>(get_u64(in, what));
}

inline std::string get_string(std::istream& in, const char* what) {
    const std::uint32_t n = get_u32(in, what);
    if (n > (1u << 20)) {
        throw FormatError(std::string("implausible string length reading ") + what);
    }
    std::string s(n, '\0');
    if (!in.read(s.data(), n)) {
        throw FormatError(std::string("truncated file reading ") + what);
    }
    return s;
}

inline std::vector<double> get_f64_array(std::istream& in, std::size_t n, const char* what) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = get_f64(in, what);
    }
    return v;
}

}  // namespace wire

namespace detail {

constexpr char kNetworkMagic[4] = {'P', 'D', 'N', '1'};

enum class LayerTag : std::uint8_t { dense = 1, conv = 2, relu = 3, maxpool = 4, softmax = 5 };

inline NetworkSpec network_from_json(const nlohmann::json& j) {
    NetworkSpec net;
    try {
        const auto& in = j.at("input");
        net.input = TensorShape{in.at("height").get<std::size_t>(), in.at("width").get<std::size_t>(),
                                in.at("channels").get<std::size_t>()};
        net.train_count = j.value("train_count", 10000u);
        for (const auto& lj : j.at("layers")) {
            const std::string kind = lj.at("kind").get<std::string>();
            const std::string name = lj.at("name").get<std::string>();
            if (kind == "dense") {
                DenseLayer d;
                d.name = name;
                d.in_size = lj.at("in").get<std::size_t>();
                d.out_size = lj.at("out").get<std::size_t>();
                d.weights = lj.at("weights").get<std::vector<double>>();
                d.biases = lj.at("biases").get<std::vector<double>>();
                net.layers.emplace_back(std::move(d));
            } else if (kind == "conv") {
                ConvLayer c;
                c.name = name;
                c.kernel_h = lj.at("kernel_h").get<std::size_t>();
                c.kernel_w = lj.at("kernel_w").get<std::size_t>();
                c.in_channels = lj.at("in_channels").get<std::size_t>();
                c.out_channels = lj.at("out_channels").get<std::size_t>();
                c.stride = lj.at("stride").get<std::size_t>();
                c.padding = lj.at("padding").get<std::size_t>();
                c.weights = lj.at("weights").get<std::vector<double>>();
                c.biases = lj.at("biases").get<std::vector<double>>();
                net.layers.emplace_back(std::move(c));
            } else if (kind == "relu") {
                net.layers.emplace_back(ReluLayer{name});
            } else if (kind == "maxpool") {
                net.layers.emplace_back(MaxPoolLayer{name, lj.at("window").get<std::size_t>(),
                                                     lj.at("stride").get<std::size_t>()});
            } else if (kind == "softmax") {
                net.layers.emplace_back(SoftmaxLayer{name});
            } else {
                throw FormatError("unknown layer kind '" + kind + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("network JSON: ") + e.what());
    }
    return net;
}

}  // namespace detail

inline void save_network(const std::string& path, const NetworkSpec& net) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out.write(detail::kNetworkMagic, 4);
    wire::put_u32(out, static_cast<std::uint32_t>(net.layers.size()));
    wire::put_u32(out, static_cast<std::uint32_t>(net.input.height));
    wire::put_u32(out, static_cast<std::uint32_t>(net.input.width));
    wire::put_u32(out, static_cast<std::uint32_t>(net.input.channels));
    wire::put_u32(out, net.train_count);
    for (const Layer& layer : net.layers) {
        if (const auto* d = std::get_if<DenseLayer>(&layer)) {
            out.put(static_cast<char>(detail::LayerTag::dense));
            wire::put_string(out, d->name);
            wire::put_u32(out, static_cast<std::uint32_t>(d->in_size));
            wire::put_u32(out, static_cast<std::uint32_t>(d->out_size));
            wire::put_f64_array(out, d->weights);
            wire::put_f64_array(out, d->biases);
        } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
            out.put(static_cast<char>(detail::LayerTag::conv));
            wire::put_string(out, c->name);
            wire::put_u32(out, static_cast<std::uint32_t>(c->kernel_h));
            wire::put_u32(out, static_cast<std::uint32_t>(c->kernel_w));
            wire::put_u32(out, static_cast<std::uint32_t>(c->in_channels));
            wire::put_u32(out, static_cast<std::uint32_t>(c->out_channels));
            wire::put_u32(out, static_cast<std::uint32_t>(c->stride));
            wire::put_u32(out, static_cast<std::uint32_t>(c->padding));
            wire::put_f64_array(out, c->weights);
            wire::put_f64_array(out, c->biases);
        } else if (const auto* r = std::get_if<ReluLayer>(&layer)) {
            out.put(static_cast<char>(detail::LayerTag::relu));
            wire::put_string(out, r->name);
        } else if (const auto* m = std::get_if<MaxPoolLayer>(&layer)) {
            out.put(static_cast<char>(detail::LayerTag::maxpool));
            wire::put_string(out, m->name);
            wire::put_u32(out, static_cast<std::uint32_t>(m->window));
            wire::put_u32(out, static_cast<std::uint32_t>(m->stride));
        } else if (const auto* s = std::get_if<SoftmaxLayer>(&layer)) {
            out.put(static_cast<char>(detail::LayerTag::softmax));
            wire::put_string(out, s->name);
        }
    }
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

inline NetworkSpec load_network(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    char magic[4] = {0, 0, 0, 0};
    in.read(magic, 4);
    NetworkSpec net;
    if (in && std::equal(magic, magic + 4, detail::kNetworkMagic)) {
        const std::uint32_t layer_count = wire::get_u32(in, "layer count");
        net.input.height = wire::get_u32(in, "input height");
        net.input.width = wire::get_u32(in, "input width");
        net.input.channels = wire::get_u32(in, "input channels");
        net.train_count = wire::get_u32(in, "train count");
        for (std::uint32_t i = 0; i < layer_count; ++i) {
            int tag = in.get();
            if (tag == EOF) {
                throw FormatError("truncated file reading layer tag");
            }
            switch (static_cast<detail::LayerTag>(tag)) {
                case detail::LayerTag::dense: {
                    DenseLayer d;
                    d.name = wire::get_string(in, "layer name");
                    d.in_size = wire::get_u32(in, "dense in");
                    d.out_size = wire::get_u32(in, "dense out");
                    d.weights = wire::get_f64_array(in, d.in_size * d.out_size, "dense weights");
                    d.biases = wire::get_f64_array(in, d.out_size, "dense biases");
                    net.layers.emplace_back(std::move(d));
                    break;
                }
                case detail::LayerTag::conv: {
                    ConvLayer c;
                    c.name = wire::get_string(in, "layer name");
                    c.kernel_h = wire::get_u32(in, "conv kernel_h");
                    c.kernel_w = wire::get_u32(in, "conv kernel_w");
                    c.in_channels = wire::get_u32(in, "conv in_channels");
                    c.out_channels = wire::get_u32(in, "conv out_channels");
                    c.stride = wire::get_u32(in, "conv stride");
                    c.padding = wire::get_u32(in, "conv padding");
                    c.weights = wire::get_f64_array(in, c.out_channels * c.in_channels * c.kernel_h * c.kernel_w,
                                                    "conv weights");
                    c.biases = wire::get_f64_array(in, c.out_channels, "conv biases");
                    net.layers.emplace_back(std::move(c));
                    break;
                }
                case detail::LayerTag::relu:
                    net.layers.emplace_back(ReluLayer{wire::get_string(in, "layer name")});
                    break;
                case detail::LayerTag::maxpool: {
                    MaxPoolLayer m;
                    m.name = wire::get_string(in, "layer name");
                    m.window = wire::get_u32(in, "maxpool window");
                    m.stride = wire::get_u32(in, "maxpool stride");
                    net.layers.emplace_back(std::move(m));
                    break;
                }
                case detail::LayerTag::softmax:
                    net.layers.emplace_back(SoftmaxLayer{wire::get_string(in, "layer name")});
                    break;
                default:
                    throw FormatError("unknown layer tag " + std::to_string(tag) + " in " + path);
            }
        }
    } else {
        // JSON mirror path.
        in.clear();
        in.seekg(0);
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) {
            throw FormatError("not a PDN1 file and not valid JSON: " + path);
        }
        net = detail::network_from_json(j);
    }
    net.validate();
    return net;
}

}  // namespace preddiff
