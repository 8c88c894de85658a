#pragma once

#include <map>
#include <string>

#include "ssmc/model.hpp"
#include "ssmc/tensor.hpp"

namespace ssmc {

// Minimal safetensors reader/writer: little-endian u64 header length, JSON
// header with dtype/shape/data_offsets per tensor plus optional __metadata__,
// then the raw buffer. F32 and F64 payloads are supported; values are held as
// doubles in memory either way.
struct TensorArchive {
    enum class Dtype { f32, f64 };

    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    static TensorArchive load(const std::string& path);
    std::string serialize(Dtype dtype) const;
    void save(const std::string& path, Dtype dtype = Dtype::f64) const;

    const Tensor& at(const std::string& name) const;  // error names the tensor
};

void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);

// Loads parameters from a foreign tensor archive through a JSON sidecar that
// maps archive tensor names onto internal parameter names. Sidecar schema:
//   {"map": [{"to": "layers.0.w_in", "from": "...in_proj.weight",
//             "rows": [0, 2048], "squeeze": true, "transpose": false}, ...]}
// "rows" slices dim 0 before shape checking; "squeeze" drops singleton dims.
Model load_checkpoint(const std::string& archive_path, const std::string& sidecar_path, const ModelConfig& cfg);

}  // namespace ssmc
