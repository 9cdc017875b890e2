#include <doctest.h>

#include <cstring>
#include <string>
#include <vector>

#include "clearseg/errors.hpp"
#include "clearseg/prng.hpp"
#include "clearseg/safetensors.hpp"
#include "test_util.hpp"

using clearseg::Tensor;
using clearseg::TensorArchive;

namespace {

// Builds a raw archive with an explicit header string and payload.
void write_raw(const std::string& path, const std::string& header, const std::vector<uint8_t>& payload) {
    std::vector<uint8_t> bytes;
    uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<uint8_t>(len >> (8 * i)));
    bytes.insert(bytes.end(), header.begin(), header.end());
    bytes.insert(bytes.end(), payload.begin(), payload.end());
    testutil::write_bytes(path, bytes);
}

} // namespace

TEST_CASE("write/read round trip preserves tensors and metadata exactly") {
    testutil::TempDir tmp;
    TensorArchive a;
    clearseg::SplitMix64 rng(11);
    Tensor t({3, 4});
    for (auto& v : t.data) v = rng.next_symmetric(2.0f);
    a.tensors["weight"] = t;
    a.tensors["bias"] = Tensor::from({2}, {-0.5f, 1.5f});
    a.metadata["heads"] = "2";
    a.metadata["gelu"] = "quick";

    const std::string path = tmp.file("a.safetensors");
    clearseg::write_safetensors(path, a);
    const TensorArchive b = clearseg::read_safetensors(path);

    REQUIRE(b.tensors.size() == 2);
    CHECK(b.tensors.at("weight").shape == t.shape);
    CHECK(b.tensors.at("weight").data == t.data);
    CHECK(b.tensors.at("bias").data == std::vector<float>{-0.5f, 1.5f});
    CHECK(b.metadata.at("heads") == "2");
    CHECK(b.metadata.at("gelu") == "quick");
}

TEST_CASE("writer is deterministic: same archive, same bytes") {
    testutil::TempDir tmp;
    TensorArchive a;
    a.tensors["z_last"] = Tensor::from({2}, {1.0f, 2.0f});
    a.tensors["a_first"] = Tensor::from({1, 3}, {3.0f, 4.0f, 5.0f});
    a.metadata["note"] = "x";
    clearseg::write_safetensors(tmp.file("one.safetensors"), a);
    clearseg::write_safetensors(tmp.file("two.safetensors"), a);
    CHECK(testutil::read_bytes(tmp.file("one.safetensors")) ==
          testutil::read_bytes(tmp.file("two.safetensors")));
}

TEST_CASE("f16 payloads are upcast to float32") {
    testutil::TempDir tmp;
    // 1.0 -> 0x3C00, -2.0 -> 0xC000, 0.5 -> 0x3800, smallest subnormal -> 0x0001
    const std::vector<uint16_t> halves = {0x3C00, 0xC000, 0x3800, 0x0001};
    std::vector<uint8_t> payload;
    for (uint16_t h : halves) {
        payload.push_back(static_cast<uint8_t>(h & 0xFF));
        payload.push_back(static_cast<uint8_t>(h >> 8));
    }
    const std::string header = R"({"t":{"dtype":"F16","shape":[4],"data_offsets":[0,8]}})";
    const std::string path = tmp.file("h.safetensors");
    write_raw(path, header, payload);
    const TensorArchive a = clearseg::read_safetensors(path);
    const auto& v = a.tensors.at("t").data;
    CHECK(v[0] == doctest::Approx(1.0));
    CHECK(v[1] == doctest::Approx(-2.0));
    CHECK(v[2] == doctest::Approx(0.5));
    CHECK(v[3] == doctest::Approx(5.9604644775390625e-08));
}

TEST_CASE("bf16 payloads are upcast to float32") {
    testutil::TempDir tmp;
    // bf16 keeps the top 16 bits of a float32: 0x3F80 -> 1.0, 0xC049 -> -3.140625
    const std::vector<uint16_t> vals = {0x3F80, 0xC049};
    std::vector<uint8_t> payload;
    for (uint16_t h : vals) {
        payload.push_back(static_cast<uint8_t>(h & 0xFF));
        payload.push_back(static_cast<uint8_t>(h >> 8));
    }
    const std::string header = R"({"t":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}})";
    const std::string path = tmp.file("b.safetensors");
    write_raw(path, header, payload);
    const TensorArchive a = clearseg::read_safetensors(path);
    CHECK(a.tensors.at("t").data[0] == doctest::Approx(1.0));
    CHECK(a.tensors.at("t").data[1] == doctest::Approx(-3.140625));
}

TEST_CASE("missing file raises a checkpoint error") {
    CHECK_THROWS_AS(clearseg::read_safetensors("/nonexistent/nope.safetensors"), clearseg::checkpoint_error);
}

TEST_CASE("truncated payload raises a checkpoint error") {
    testutil::TempDir tmp;
    const std::string header = R"({"t":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})";
    const std::string path = tmp.file("short.safetensors");
    write_raw(path, header, {0, 0, 0, 0}); // 4 bytes instead of 16
    CHECK_THROWS_AS(clearseg::read_safetensors(path), clearseg::checkpoint_error);
}

TEST_CASE("offset range must match the element count") {
    testutil::TempDir tmp;
    const std::string header = R"({"t":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}})";
    const std::string path = tmp.file("bad.safetensors");
    write_raw(path, header, {0, 0, 0, 0});
    CHECK_THROWS_AS(clearseg::read_safetensors(path), clearseg::checkpoint_error);
}

TEST_CASE("negative dimensions are rejected") {
    testutil::TempDir tmp;
    const std::string header = R"({"t":{"dtype":"F32","shape":[-2],"data_offsets":[0,8]}})";
    const std::string path = tmp.file("neg.safetensors");
    write_raw(path, header, std::vector<uint8_t>(8, 0));
    CHECK_THROWS_AS(clearseg::read_safetensors(path), clearseg::checkpoint_error);
}

TEST_CASE("unsupported dtypes are rejected") {
    testutil::TempDir tmp;
    const std::string header = R"({"t":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})";
    const std::string path = tmp.file("i64.safetensors");
    write_raw(path, header, std::vector<uint8_t>(8, 0));
    CHECK_THROWS_AS(clearseg::read_safetensors(path), clearseg::checkpoint_error);
}

TEST_CASE("garbage header raises a checkpoint error") {
    testutil::TempDir tmp;
    const std::string path = tmp.file("junk.safetensors");
    write_raw(path, "this is not json", {});
    CHECK_THROWS_AS(clearseg::read_safetensors(path), clearseg::checkpoint_error);
}
