#pragma once

#include <map>
#include <string>

#include "clearseg/tensor.hpp"

namespace clearseg {

// In-memory view of a safetensors archive: 8-byte little-endian header length,
// JSON header mapping names to {dtype, shape, data_offsets}, then raw data.
// F16/BF16 payloads are upcast to float32 on read; writes are always F32.
struct TensorArchive {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata; // "__metadata__" entry, string-valued
};

TensorArchive read_safetensors(const std::string& path);

// Deterministic: tensors laid out in key order, header serialized with sorted
// keys and padded to an 8-byte boundary. Same archive in, same bytes out.
void write_safetensors(const std::string& path, const TensorArchive& archive);

} // namespace clearseg
