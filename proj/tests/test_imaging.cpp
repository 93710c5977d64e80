#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <random>

#include "preddiff/imaging.hpp"
#include "support/test_support.hpp"

using namespace preddiff;
using namespace testsupport;

namespace {

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

RelevanceMap map_from_scores(std::size_t h, std::size_t w, std::vector<double> scores) {
    RelevanceMap map;
    map.height = h;
    map.width = w;
    map.scores = std::move(scores);
    map.counts.assign(h * w, 1);
    return map;
}

}  // namespace

TEST_CASE("PPM loading") {
    TempDir dir("ppm");

    SECTION("2x2 P6 with known bytes") {
        const std::string path = dir.file("tiny.ppm");
        {
            std::ofstream out(path, std::ios::binary);
            out << "P6\n2 2\n255\n";
            const unsigned char bytes[] = {0, 0, 0, 255, 255, 255, 255, 0, 0, 0, 0, 255};
            out.write(reinterpret_cast<const char*>(bytes), sizeof(bytes));
        }
        const Image img = load_image(path);
        CHECK(img.height == 2);
        CHECK(img.width == 2);
        CHECK(img.channels == 3);
        CHECK(img.at(0, 0, 0) == 0.0);
        CHECK(img.at(0, 1, 0) == 1.0);
        CHECK(img.at(0, 1, 2) == 1.0);
        CHECK(img.at(1, 0, 0) == 1.0);
        CHECK(img.at(1, 0, 1) == 0.0);
        CHECK(img.at(1, 1, 2) == 1.0);
    }

    SECTION("comments and whitespace in the header") {
        const std::string path = dir.file("comment.ppm");
        {
            std::ofstream out(path, std::ios::binary);
            out << "P5\n# a comment\n 3 # another\n1\n255\n";
            const unsigned char bytes[] = {7, 8, 9};
            out.write(reinterpret_cast<const char*>(bytes), sizeof(bytes));
        }
        const Image img = load_image(path);
        CHECK(img.height == 1);
        CHECK(img.width == 3);
        CHECK(img.channels == 1);
    }

    SECTION("truncated raster is a format error, not a crash") {
        const std::string path = dir.file("trunc.ppm");
        {
            std::ofstream out(path, std::ios::binary);
            out << "P6\n4 4\n255\n";
            out << "only a few bytes";
        }
        CHECK_THROWS_AS(load_image(path), FormatError);
    }

    SECTION("unsupported maxval") {
        const std::string path = dir.file("depth.ppm");
        {
            std::ofstream out(path, std::ios::binary);
            out << "P6\n1 1\n65535\n";
            out << "abcdef";
        }
        CHECK_THROWS_AS(load_image(path), FormatError);
    }

    SECTION("missing file") {
        CHECK_THROWS_AS(load_image(dir.file("absent.ppm")), IoError);
    }
}

TEST_CASE("PPM round-trip byte identity") {
    TempDir dir("ppm_rt");
    std::mt19937_64 rng(42);

    for (std::size_t channels : {1u, 3u}) {
        // Quantize to the byte grid first: files are the contract, and
        // save(load(file)) must reproduce the file exactly.
        Image img = uniform_random_image(rng, 9, 7, channels);
        for (double& v : img.data) {
            v = std::round(v * 255.0) / 255.0;
        }
        const std::string a = dir.file("a" + std::to_string(channels));
        const std::string b = dir.file("b" + std::to_string(channels));
        save_ppm(a, img);
        const Image loaded = load_image(a);
        save_ppm(b, loaded);
        CHECK(read_bytes(a) == read_bytes(b));
        CHECK(loaded.data == img.data);
    }
}

TEST_CASE("render_heatmap") {
    SECTION("all-zero map renders fully transparent") {
        const RelevanceMap map = map_from_scores(3, 3, std::vector<double>(9, 0.0));
        const RenderedImage img = render_heatmap(map);
        for (std::size_t i = 0; i < 9; ++i) {
            CHECK(img.rgba[i * 4 + 0] == 0);
            CHECK(img.rgba[i * 4 + 1] == 0);
            CHECK(img.rgba[i * 4 + 2] == 0);
            CHECK(img.rgba[i * 4 + 3] == 0);
        }
    }

    SECTION("single positive pixel at the quantile maximum is pure red") {
        std::vector<double> scores(16, 0.0);
        scores[5] = 0.75;
        const RenderedImage img = render_heatmap(map_from_scores(4, 4, scores), nullptr, 1.0);
        CHECK(img.rgba[5 * 4 + 0] == 255);
        CHECK(img.rgba[5 * 4 + 1] == 0);
        CHECK(img.rgba[5 * 4 + 2] == 0);
        CHECK(img.rgba[5 * 4 + 3] == 255);
        CHECK(img.rgba[0] == 0);
        CHECK(img.rgba[3] == 0);
    }

    SECTION("negating the map swaps red and blue with identical alphas") {
        std::mt19937_64 rng(7);
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<double> scores(25);
        for (double& s : scores) {
            s = dist(rng);
        }
        std::vector<double> negated(scores);
        for (double& s : negated) {
            s = -s;
        }
        const RenderedImage a = render_heatmap(map_from_scores(5, 5, scores), nullptr, 0.9);
        const RenderedImage b = render_heatmap(map_from_scores(5, 5, negated), nullptr, 0.9);
        for (std::size_t i = 0; i < 25; ++i) {
            CHECK(a.rgba[i * 4 + 0] == b.rgba[i * 4 + 2]);
            CHECK(a.rgba[i * 4 + 2] == b.rgba[i * 4 + 0]);
            CHECK(a.rgba[i * 4 + 3] == b.rgba[i * 4 + 3]);
        }
    }

    SECTION("positive scaling leaves the rendering bit-identical") {
        std::mt19937_64 rng(8);
        std::normal_distribution<double> dist(0.0, 2.0);
        std::vector<double> scores(30);
        for (double& s : scores) {
            s = dist(rng);
        }
        const RenderedImage base = render_heatmap(map_from_scores(5, 6, scores));
        for (double factor : {2.0, 1024.0, 7.25, 1e6}) {
            std::vector<double> scaled(scores);
            for (double& s : scaled) {
                s *= factor;
            }
            const RenderedImage out = render_heatmap(map_from_scores(5, 6, scaled));
            CHECK(out.rgba == base.rgba);
        }
    }

    SECTION("overlay composites onto the grayscale input") {
        Image overlay(1, 2, 3);
        overlay.data = {1.0, 1.0, 1.0, 0.2, 0.4, 0.6};
        std::vector<double> scores = {0.0, 1.0};
        const RenderedImage img = render_heatmap(map_from_scores(1, 2, scores), &overlay, 1.0);
        // Pixel 0: zero score, pure grayscale (luma of white = 255).
        CHECK(img.rgba[0] == 255);
        CHECK(img.rgba[1] == 255);
        CHECK(img.rgba[2] == 255);
        CHECK(img.rgba[3] == 255);
        // Pixel 1: saturated positive, pure red.
        CHECK(img.rgba[4] == 255);
        CHECK(img.rgba[5] == 0);
        CHECK(img.rgba[6] == 0);
        CHECK(img.rgba[7] == 255);
    }

    SECTION("quantile bounds") {
        const RelevanceMap map = map_from_scores(2, 2, {1.0, 2.0, 3.0, 4.0});
        CHECK_THROWS_AS(render_heatmap(map, nullptr, 0.5), ValidationError);
        CHECK_THROWS_AS(render_heatmap(map, nullptr, 1.5), ValidationError);
        CHECK_NOTHROW(render_heatmap(map, nullptr, 0.51));
    }
}

TEST_CASE("top_percent_mask") {
    SECTION("p=100 marks everything") {
        const BooleanMask mask = top_percent_mask(map_from_scores(4, 4, std::vector<double>(16, 0.25)), 100.0);
        CHECK(mask.count() == 16);
    }

    SECTION("10x10 with p=5 marks exactly 5 pixels") {
        std::mt19937_64 rng(3);
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<double> scores(100);
        for (double& s : scores) {
            s = dist(rng);
        }
        const BooleanMask mask = top_percent_mask(map_from_scores(10, 10, scores), 5.0);
        CHECK(mask.count() == 5);
        // They really are the largest five by |score|.
        double smallest_marked = 1e300;
        double largest_unmarked = 0.0;
        for (std::size_t i = 0; i < 100; ++i) {
            const double m = std::abs(scores[i]);
            if (mask.mask[i]) {
                smallest_marked = std::min(smallest_marked, m);
            } else {
                largest_unmarked = std::max(largest_unmarked, m);
            }
        }
        CHECK(smallest_marked >= largest_unmarked);
    }

    SECTION("ties break toward earlier row-major pixels") {
        const BooleanMask mask = top_percent_mask(map_from_scores(10, 10, std::vector<double>(100, 0.5)), 5.0);
        for (std::size_t i = 0; i < 100; ++i) {
            CHECK(mask.mask[i] == (i < 5 ? 1 : 0));
        }
    }

    SECTION("cardinality is ceil(p% of the pixels) for any input") {
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t h = 1 + static_cast<std::size_t>(unif(rng) * 12);
            const std::size_t w = 1 + static_cast<std::size_t>(unif(rng) * 12);
            std::vector<double> scores(h * w);
            for (double& s : scores) {
                s = unif(rng) - 0.5;
            }
            const double p = 0.5 + unif(rng) * 99.5;
            const BooleanMask mask = top_percent_mask(map_from_scores(h, w, scores), p);
            CHECK(mask.count() == static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(h * w))));
        }
    }

    SECTION("domain") {
        const RelevanceMap map = map_from_scores(2, 2, {1, 2, 3, 4});
        CHECK_THROWS_AS(top_percent_mask(map, 0.0), ValidationError);
        CHECK_THROWS_AS(top_percent_mask(map, 101.0), ValidationError);
    }
}

TEST_CASE("rendered images flatten onto PPM deterministically") {
    TempDir dir("flat");
    RenderedImage img(1, 2);
    // Half-transparent red and a transparent pixel.
    img.rgba = {255, 0, 0, 128, 0, 0, 0, 0};
    const std::string path = dir.file("r.ppm");
    save_image(path, img);
    const Image loaded = load_image(path);
    CHECK(loaded.at(0, 0, 0) == std::round(255.0 * (128.0 / 255.0)) / 255.0);
    CHECK(loaded.at(0, 1, 0) == 0.0);

    const std::string again = dir.file("r2.ppm");
    save_image(again, img);
    CHECK(read_bytes(path) == read_bytes(again));
}

TEST_CASE("mask_to_image round-trips through P5") {
    TempDir dir("mask");
    BooleanMask mask{2, 3, {1, 0, 1, 0, 0, 1}};
    const Image img = mask_to_image(mask);
    const std::string path = dir.file("m.pgm");
    save_ppm(path, img);
    const Image loaded = load_image(path);
    CHECK(loaded.data == img.data);
}
