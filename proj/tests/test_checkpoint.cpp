#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prue/arch.hpp"
#include "prue/checkpoint.hpp"
#include "prue/dataset.hpp"
#include "prue/errors.hpp"
#include "prue/model.hpp"

using namespace prue;

namespace {

struct TempFile {
    std::filesystem::path path;
    explicit TempFile(const std::string& name) {
        path = std::filesystem::temp_directory_path() / name;
        std::filesystem::remove(path);
    }
    ~TempFile() {
        std::error_code ec;
        std::filesystem::remove(path, ec);
    }
    std::string str() const { return path.string(); }
};

std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    REQUIRE(bool(f));
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

std::uint32_t read_u32_le(const std::vector<unsigned char>& b, std::size_t at) {
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v |= std::uint32_t(b[at + i]) << (8 * i);
    return v;
}

// Parses the header JSON out of a checkpoint file, lets the test rewrite it,
// and reassembles the frame with a corrected length prefix.
void mutate_header(const std::string& path, const std::function<void(nlohmann::json&)>& fn) {
    auto bytes = slurp(path);
    std::uint32_t len = read_u32_le(bytes, 5);
    auto j = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + 9 + len);
    fn(j);
    std::string header = j.dump();
    std::vector<unsigned char> out(bytes.begin(), bytes.begin() + 5);
    auto nl = std::uint32_t(header.size());
    for (std::size_t i = 0; i < 4; ++i) out.push_back((unsigned char)((nl >> (8 * i)) & 0xff));
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), bytes.begin() + 9 + len, bytes.end());
    spit(path, out);
}

Model<float> sparse_cnn(std::uint64_t seed) {
    auto m = Model<float>::build(make_preset("cnn-s", {1, 8, 8}, 3), seed);
    auto bits = std::vector<std::uint8_t>(m.flat_prunable_masks().size(), 1);
    for (std::size_t i = 0; i < bits.size(); i += 3) bits[i] = 0;
    m.set_prunable_masks(bits);
    return m;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact") {
    TempFile tf("ckpt_roundtrip.prue");
    auto m = sparse_cnn(5);
    checkpoint_save(tf.str(), m, {}, "abc123");
    auto loaded = checkpoint_load<float>(tf.str());

    CHECK(loaded.model.checksum() == m.checksum());
    CHECK(loaded.model.spec() == m.spec());
    CHECK(loaded.header.config_hash == "abc123");
    REQUIRE(loaded.model.params().size() == m.params().size());
    for (std::size_t i = 0; i < m.params().size(); ++i) {
        CHECK(loaded.model.params()[i].name == m.params()[i].name);
        CHECK(loaded.model.params()[i].value.values() == m.params()[i].value.values());
        if (m.params()[i].prunable) {
            CHECK(loaded.model.params()[i].mask.values() == m.params()[i].mask.values());
        }
    }

    BlobsOptions bo;
    bo.num_classes = 3;
    bo.per_class = 4;
    bo.dim = 64;
    bo.seed = 11;
    auto flat = make_blobs<float>(bo);
    // reinterpret the 64-wide rows as 1x8x8 images
    Dataset<float> ds = flat;
    ds.input_shape = {1, 8, 8};
    auto batch = make_batch(ds, {0, 3, 7, 10});
    NoGradGuard ng;
    CHECK(loaded.model.forward(batch.x).values() == m.forward(batch.x).values());
}

TEST_CASE("container frame matches the documented layout") {
    TempFile tf("ckpt_layout.prue");
    auto m = Model<float>::build(make_preset("mlp-s", {2}, 3), 7);
    checkpoint_save(tf.str(), m);
    auto bytes = slurp(tf.str());

    REQUIRE(bytes.size() > 9);
    CHECK(bytes[0] == 'P');
    CHECK(bytes[1] == 'R');
    CHECK(bytes[2] == 'U');
    CHECK(bytes[3] == 'E');
    CHECK(bytes[4] == 0x01);
    std::uint32_t len = read_u32_le(bytes, 5);
    auto j = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + 9 + len);
    CHECK(j.at("dtype") == "float32");
    CHECK(j.at("arch").at("name") == "mlp-s");

    std::uint64_t total = 0;
    std::uint64_t cursor = 0;
    for (const auto& e : j.at("manifest")) {
        CHECK(e.at("offset").get<std::uint64_t>() == cursor);
        cursor += e.at("nbytes").get<std::uint64_t>();
        total += e.at("nbytes").get<std::uint64_t>();
    }
    CHECK(bytes.size() == 9 + len + total);

    // mlp-s is flatten + two dense layers: weight, mask, bias each
    std::vector<std::string> names;
    for (const auto& e : j.at("manifest")) names.push_back(e.at("name"));
    CHECK(names == std::vector<std::string>{"layer1/weight", "mask/layer1/weight", "layer1/bias",
                                            "layer3/weight", "mask/layer3/weight", "layer3/bias"});
}

TEST_CASE("saving a loaded checkpoint reproduces the file byte for byte") {
    TempFile a("ckpt_once.prue");
    TempFile b("ckpt_twice.prue");
    auto m = sparse_cnn(9);
    checkpoint_save(a.str(), m, {}, "h1");
    auto loaded = checkpoint_load<float>(a.str());
    checkpoint_save(b.str(), loaded.model, {}, "h1");
    CHECK(slurp(a.str()) == slurp(b.str()));
}

TEST_CASE("score vectors persist with their metadata") {
    TempFile tf("ckpt_scores.prue");
    auto m = Model<float>::build(make_preset("mlp-s", {2}, 3), 3);

    ScoreVector sv;
    sv.method = ScoreMethod::prue;
    sv.scores.resize(m.flat_prunable_masks().size());
    for (std::size_t i = 0; i < sv.scores.size(); ++i) sv.scores[i] = 0.001 * double(i) + 1e-9;
    sv.split = "train";
    sv.sample_count = 120;
    sv.seed = 9;

    ScoreVector rnd;
    rnd.method = ScoreMethod::random;
    rnd.scores.assign(m.flat_prunable_masks().size(), 0.5);
    rnd.split = "train";
    rnd.sample_count = 120;
    rnd.seed = 42;

    checkpoint_save(tf.str(), m, {sv, rnd});
    auto loaded = checkpoint_load<float>(tf.str());
    REQUIRE(loaded.scores.size() == 2);
    CHECK(loaded.scores[0].method == ScoreMethod::prue);
    CHECK(loaded.scores[0].scores == sv.scores);
    CHECK(loaded.scores[0].split == "train");
    CHECK(loaded.scores[0].sample_count == 120);
    CHECK(loaded.scores[0].seed == 9);
    CHECK(loaded.scores[1].method == ScoreMethod::random);
    CHECK(loaded.scores[1].scores == rnd.scores);

    SUBCASE("duplicate methods are rejected at save time") {
        CHECK_THROWS_WITH_AS(checkpoint_save(tf.str(), m, {sv, sv}),
                             doctest::Contains("duplicate score vector"), ConfigError);
    }
}

TEST_CASE("malformed containers are rejected with byte-accurate messages") {
    TempFile tf("ckpt_bad.prue");
    auto m = Model<float>::build(make_preset("mlp-s", {2}, 3), 1);
    checkpoint_save(tf.str(), m);
    auto good = slurp(tf.str());

    SUBCASE("missing file") {
        CHECK_THROWS_WITH_AS(checkpoint_load<float>("/tmp/no_such_ckpt.prue"),
                             doctest::Contains("cannot open"), IoError);
    }
    SUBCASE("bad magic") {
        auto bad = good;
        bad[0] = 'X';
        spit(tf.str(), bad);
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()), doctest::Contains("bad magic"),
                             IoError);
    }
    SUBCASE("unsupported version") {
        auto bad = good;
        bad[4] = 0x02;
        spit(tf.str(), bad);
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()),
                             doctest::Contains("unsupported format version 2"), IoError);
    }
    SUBCASE("truncated buffers name expected vs actual byte counts") {
        auto bad = good;
        bad.resize(bad.size() - 10);
        spit(tf.str(), bad);
        std::string want = "expected " + std::to_string(good.size()) + " bytes, got " +
                           std::to_string(good.size() - 10);
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()), doctest::Contains(want.c_str()),
                             IoError);
    }
    SUBCASE("trailing garbage is a length disagreement") {
        auto bad = good;
        bad.push_back(0);
        bad.push_back(0);
        spit(tf.str(), bad);
        std::string want = "expected " + std::to_string(good.size());
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()), doctest::Contains(want.c_str()),
                             IoError);
    }
    SUBCASE("header length running past the file") {
        auto bad = good;
        bad[5] = 0xff;
        bad[6] = 0xff;
        bad[7] = 0xff;
        bad[8] = 0x00;
        spit(tf.str(), bad);
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()),
                             doctest::Contains("frame and header"), IoError);
    }
    SUBCASE("header that is not JSON") {
        auto bad = good;
        bad[9] = 'X';  // first header byte, was '{'
        spit(tf.str(), bad);
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()),
                             doctest::Contains("not valid JSON"), IoError);
    }
    SUBCASE("manifest nbytes disagreeing with the shape") {
        mutate_header(tf.str(), [](nlohmann::json& j) {
            j["manifest"][0]["nbytes"] = j["manifest"][0]["nbytes"].get<std::uint64_t>() + 4;
        });
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()), doctest::Contains("implies"),
                             IoError);
    }
    SUBCASE("manifest offset disagreeing with the packing") {
        mutate_header(tf.str(), [](nlohmann::json& j) {
            j["manifest"][1]["offset"] = j["manifest"][1]["offset"].get<std::uint64_t>() + 1;
            j["manifest"][1]["nbytes"] = j["manifest"][1]["nbytes"].get<std::uint64_t>() - 1;
        });
        CHECK_THROWS_AS(checkpoint_load<float>(tf.str()), IoError);
    }
    SUBCASE("renamed tensor leaves a parameter unfilled") {
        mutate_header(tf.str(),
                      [](nlohmann::json& j) { j["manifest"][0]["name"] = "layer1/weightX"; });
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()),
                             doctest::Contains("no tensor 'layer1/weight'"), IoError);
    }
    SUBCASE("reshaped tensor is rejected, never silently adapted") {
        mutate_header(tf.str(), [](nlohmann::json& j) {
            auto shape = j["manifest"][0]["shape"].get<std::vector<std::size_t>>();
            std::swap(shape[0], shape[1]);
            j["manifest"][0]["shape"] = shape;
        });
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()),
                             doctest::Contains("architecture implies"), IoError);
    }
    SUBCASE("mask byte outside {0,1}") {
        auto j = nlohmann::json::parse(good.begin() + 9, good.begin() + 9 + read_u32_le(good, 5));
        std::uint64_t mask_off = 0;
        bool found = false;
        for (const auto& e : j.at("manifest")) {
            if (e.at("name") == "mask/layer1/weight") {
                mask_off = e.at("offset").get<std::uint64_t>();
                found = true;
            }
        }
        REQUIRE(found);
        auto bad = good;
        bad[9 + read_u32_le(good, 5) + mask_off] = 2;
        spit(tf.str(), bad);
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str()),
                             doctest::Contains("expected 0 or 1"), IoError);
    }
}

TEST_CASE("architecture and dtype guards") {
    TempFile tf("ckpt_guard.prue");
    auto m = Model<float>::build(make_preset("mlp-s", {2}, 3), 1);
    checkpoint_save(tf.str(), m);

    SUBCASE("expected architecture mismatch") {
        auto other = make_preset("mlp-l", {2}, 3);
        CHECK_THROWS_WITH_AS(checkpoint_load<float>(tf.str(), &other),
                             doctest::Contains("'mlp-s'"), ConfigError);
    }
    SUBCASE("matching expectation loads fine") {
        auto same = make_preset("mlp-s", {2}, 3);
        CHECK(checkpoint_load<float>(tf.str(), &same).model.checksum() == m.checksum());
    }
    SUBCASE("dtype mismatch") {
        CHECK_THROWS_WITH_AS(checkpoint_load<double>(tf.str()),
                             doctest::Contains("stores float32"), ConfigError);
    }
}

TEST_CASE("float64 models round trip too") {
    TempFile tf("ckpt_f64.prue");
    auto m = Model<double>::build(make_preset("mlp-s", {4}, 2), 13);
    checkpoint_save(tf.str(), m);
    auto loaded = checkpoint_load<double>(tf.str());
    CHECK(loaded.model.checksum() == m.checksum());
    CHECK(loaded.header.dtype == "float64");
}
