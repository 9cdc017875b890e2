#include "clearseg/safetensors.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "clearseg/errors.hpp"

namespace clearseg {

namespace {

using nlohmann::json;

float f16_to_f32(uint16_t h) {
    const uint32_t sign = static_cast<uint32_t>(h >> 15) << 31;
    uint32_t exp = (h >> 10) & 0x1F;
    uint32_t mant = h & 0x3FF;
    uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal half: renormalize
            exp = 127 - 15 + 1;
            while ((mant & 0x400) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3FF;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
}

float bf16_to_f32(uint16_t h) {
    const uint32_t bits = static_cast<uint32_t>(h) << 16;
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
}

} // namespace

TensorArchive read_safetensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw checkpoint_error("archive", "cannot open " + path);
    uint64_t header_len = 0;
    unsigned char lenbuf[8];
    if (!in.read(reinterpret_cast<char*>(lenbuf), 8))
        throw checkpoint_error("archive", path + ": truncated before header length");
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | lenbuf[i];
    const auto file_size = std::filesystem::file_size(path);
    if (header_len == 0 || header_len > file_size - 8)
        throw checkpoint_error("archive", path + ": header length " + std::to_string(header_len) + " exceeds file size");
    std::string header(header_len, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(header_len)))
        throw checkpoint_error("archive", path + ": truncated header");
    json j;
    try {
        j = json::parse(header);
    } catch (const json::exception& e) {
        throw checkpoint_error("archive", path + ": bad JSON header: " + e.what());
    }
    const uint64_t data_size = file_size - 8 - header_len;
    std::vector<char> blob(data_size);
    if (data_size > 0 && !in.read(blob.data(), static_cast<std::streamsize>(data_size)))
        throw checkpoint_error("archive", path + ": truncated tensor data");

    TensorArchive archive;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& name = it.key();
        if (name == "__metadata__") {
            for (auto mit = it.value().begin(); mit != it.value().end(); ++mit)
                archive.metadata[mit.key()] = mit.value().get<std::string>();
            continue;
        }
        const json& entry = it.value();
        const std::string dtype = entry.at("dtype").get<std::string>();
        std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        const auto offsets = entry.at("data_offsets").get<std::vector<uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data_size)
            throw checkpoint_error("archive", path + ": bad data_offsets for " + name);
        const uint64_t nbytes = offsets[1] - offsets[0];
        int64_t numel = 1;
        for (int64_t d : shape) {
            if (d < 0) throw checkpoint_error("archive", path + ": negative dimension for " + name);
            numel *= d;
        }
        Tensor t;
        t.shape = std::move(shape);
        t.data.resize(static_cast<size_t>(numel));
        const char* src = blob.data() + offsets[0];
        if (dtype == "F32") {
            if (nbytes != static_cast<uint64_t>(numel) * 4)
                throw checkpoint_error("archive", path + ": size mismatch for " + name);
            std::memcpy(t.data.data(), src, nbytes);
        } else if (dtype == "F16" || dtype == "BF16") {
            if (nbytes != static_cast<uint64_t>(numel) * 2)
                throw checkpoint_error("archive", path + ": size mismatch for " + name);
            for (int64_t i = 0; i < numel; ++i) {
                uint16_t h;
                std::memcpy(&h, src + i * 2, 2);
                t.data[static_cast<size_t>(i)] = dtype == "F16" ? f16_to_f32(h) : bf16_to_f32(h);
            }
        } else {
            throw checkpoint_error("archive", path + ": unsupported dtype " + dtype + " for " + name);
        }
        archive.tensors.emplace(name, std::move(t));
    }
    return archive;
}

void write_safetensors(const std::string& path, const TensorArchive& archive) {
    json header = json::object();
    if (!archive.metadata.empty()) {
        json meta = json::object();
        for (const auto& [k, v] : archive.metadata) meta[k] = v;
        header["__metadata__"] = meta;
    }
    uint64_t offset = 0;
    for (const auto& [name, t] : archive.tensors) { // std::map: key order, stable
        const uint64_t nbytes = static_cast<uint64_t>(t.numel()) * 4;
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + nbytes}}};
        offset += nbytes;
    }
    std::string hs = header.dump();
    while ((hs.size() + 8) % 8 != 0) hs.push_back(' ');

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw checkpoint_error("archive", "cannot write " + tmp);
        const uint64_t hlen = hs.size();
        unsigned char lenbuf[8];
        for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((hlen >> (8 * i)) & 0xFF);
        out.write(reinterpret_cast<const char*>(lenbuf), 8);
        out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& [name, t] : archive.tensors) {
            (void)name;
            out.write(reinterpret_cast<const char*>(t.data.data()),
                      static_cast<std::streamsize>(t.data.size() * 4));
        }
        if (!out) throw checkpoint_error("archive", "short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

} // namespace clearseg
