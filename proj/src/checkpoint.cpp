#include "ssmc/checkpoint.hpp"

#include <cstring>
#include <json.hpp>

#include "ssmc/io_util.hpp"

using nlohmann::json;

namespace ssmc {

namespace {

uint64_t read_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void write_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>(v & 0xff));
        v >>= 8;
    }
}

}  // namespace

TensorArchive TensorArchive::load(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 8) throw std::runtime_error("safetensors: truncated file " + path);
    const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
    const uint64_t hlen = read_u64_le(base);
    if (8 + hlen > bytes.size()) throw std::runtime_error("safetensors: header overruns file " + path);
    json header = json::parse(bytes.substr(8, hlen));
    const size_t data_start = 8 + hlen;

    TensorArchive ar;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") {
            for (auto m = it.value().begin(); m != it.value().end(); ++m) {
                ar.metadata[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        const json& t = it.value();
        const std::string dtype = t.at("dtype").get<std::string>();
        Shape shape;
        for (const auto& d : t.at("shape")) shape.push_back(d.get<int64_t>());
        const uint64_t off0 = t.at("data_offsets").at(0).get<uint64_t>();
        const uint64_t off1 = t.at("data_offsets").at(1).get<uint64_t>();
        if (data_start + off1 > bytes.size()) {
            throw std::runtime_error("safetensors: tensor '" + it.key() + "' overruns file");
        }
        const int64_t n = shape_numel(shape);
        Tensor tensor(shape);
        const char* src = bytes.data() + data_start + off0;
        if (dtype == "F64") {
            if (off1 - off0 != static_cast<uint64_t>(n) * 8) {
                throw std::runtime_error("safetensors: tensor '" + it.key() + "' has wrong byte count");
            }
            std::memcpy(tensor.data(), src, static_cast<size_t>(n) * 8);
        } else if (dtype == "F32") {
            if (off1 - off0 != static_cast<uint64_t>(n) * 4) {
                throw std::runtime_error("safetensors: tensor '" + it.key() + "' has wrong byte count");
            }
            for (int64_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, src + i * 4, 4);
                tensor[i] = static_cast<double>(f);
            }
        } else {
            throw std::runtime_error("safetensors: tensor '" + it.key() + "' has unsupported dtype " + dtype);
        }
        ar.tensors.emplace(it.key(), std::move(tensor));
    }
    return ar;
}

std::string TensorArchive::serialize(Dtype dtype) const {
    const size_t elem = dtype == Dtype::f64 ? 8 : 4;
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        json entry;
        entry["dtype"] = dtype == Dtype::f64 ? "F64" : "F32";
        entry["shape"] = t.shape();
        entry["data_offsets"] = {offset, offset + static_cast<uint64_t>(t.numel()) * elem};
        header[name] = entry;
        offset += static_cast<uint64_t>(t.numel()) * elem;
    }
    if (!metadata.empty()) {
        json md = json::object();
        for (const auto& [k, v] : metadata) md[k] = v;
        header["__metadata__"] = md;
    }
    std::string htxt = header.dump();
    std::string out;
    write_u64_le(out, htxt.size());
    out += htxt;
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : tensors) {
        if (dtype == Dtype::f64) {
            const char* p = reinterpret_cast<const char*>(t.data());
            out.append(p, static_cast<size_t>(t.numel()) * 8);
        } else {
            for (int64_t i = 0; i < t.numel(); ++i) {
                float f = static_cast<float>(t[i]);
                char buf[4];
                std::memcpy(buf, &f, 4);
                out.append(buf, 4);
            }
        }
    }
    return out;
}

void TensorArchive::save(const std::string& path, Dtype dtype) const { atomic_write_file(path, serialize(dtype)); }

const Tensor& TensorArchive::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("tensor archive: missing tensor '" + name + "'");
    return it->second;
}

std::string config_to_json(const ModelConfig& cfg) {
    json j;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["d_inner"] = cfg.d_inner;
    j["state_size"] = cfg.state_size;
    j["conv_width"] = cfg.conv_width;
    j["vocab_size"] = cfg.vocab_size;
    j["dt"] = cfg.dt_parameterization == DtParam::full ? "full" : "low_rank";
    j["dt_rank"] = cfg.dt_rank;
    j["layer_norms"] = cfg.layer_norms;
    j["final_norm"] = cfg.final_norm;
    j["norm_eps"] = cfg.norm_eps;
    return j.dump();
}

ModelConfig config_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int64_t>();
    cfg.d_inner = j.at("d_inner").get<int64_t>();
    cfg.state_size = j.at("state_size").get<int64_t>();
    cfg.conv_width = j.at("conv_width").get<int64_t>();
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.dt_parameterization = j.at("dt").get<std::string>() == "full" ? DtParam::full : DtParam::low_rank;
    cfg.dt_rank = j.value("dt_rank", int64_t{0});
    cfg.layer_norms = j.value("layer_norms", true);
    cfg.final_norm = j.value("final_norm", true);
    cfg.norm_eps = j.value("norm_eps", 1e-5);
    cfg.validate();
    return cfg;
}

void save_model(const Model& m, const std::string& path) {
    TensorArchive ar;
    for (const auto& [name, t] : m.named_params()) ar.tensors.emplace(name, *t);
    ar.metadata["format"] = "ssmc-model-v1";
    ar.metadata["config"] = config_to_json(m.cfg);
    ar.save(path, TensorArchive::Dtype::f64);
}

Model load_model(const std::string& path) {
    TensorArchive ar = TensorArchive::load(path);
    auto it = ar.metadata.find("config");
    if (it == ar.metadata.end()) throw std::runtime_error("model archive " + path + " lacks config metadata");
    Model m;
    m.cfg = config_from_json(it->second);
    m.layers.resize(static_cast<size_t>(m.cfg.n_layers));
    for (auto& [name, slot] : m.named_params()) {
        const Tensor& src = ar.at(name);
        *slot = src;
    }
    // shape-check against a freshly built skeleton
    Model ref = Model::random(m.cfg, 0);
    auto got = m.named_params();
    auto want = ref.named_params();
    for (size_t i = 0; i < got.size(); ++i) {
        if (got[i].second->shape() != want[i].second->shape()) {
            throw std::runtime_error("model archive: tensor '" + got[i].first + "' has shape " +
                                     shape_str(got[i].second->shape()) + ", expected " +
                                     shape_str(want[i].second->shape()));
        }
    }
    return m;
}

namespace {

Tensor squeeze_all(const Tensor& t) {
    Shape s;
    for (int64_t d : t.shape()) {
        if (d != 1) s.push_back(d);
    }
    return t.reshaped(s);
}

Tensor transpose_tensor(const Tensor& t) {
    if (t.rank() != 2) throw std::runtime_error("sidecar transpose: tensor must be rank-2, got " + shape_str(t.shape()));
    Tensor out({t.dim(1), t.dim(0)});
    for (int64_t i = 0; i < t.dim(0); ++i) {
        for (int64_t j = 0; j < t.dim(1); ++j) out.at({j, i}) = t.at({i, j});
    }
    return out;
}

}  // namespace

Model load_checkpoint(const std::string& archive_path, const std::string& sidecar_path, const ModelConfig& cfg) {
    cfg.validate();
    TensorArchive ar = TensorArchive::load(archive_path);
    json sidecar = json::parse(read_file(sidecar_path));

    std::map<std::string, json> mapping;
    for (const auto& entry : sidecar.at("map")) {
        mapping[entry.at("to").get<std::string>()] = entry;
    }

    Model m;
    m.cfg = cfg;
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    Model ref = Model::random(cfg, 0);
    auto ref_params = ref.named_params();
    auto dst_params = m.named_params();
    for (size_t i = 0; i < dst_params.size(); ++i) {
        const std::string& name = dst_params[i].first;
        auto it = mapping.find(name);
        if (it == mapping.end()) throw std::runtime_error("checkpoint sidecar: no mapping for parameter '" + name + "'");
        const json& entry = it->second;
        Tensor t = ar.at(entry.at("from").get<std::string>());
        if (entry.contains("rows")) {
            const int64_t r0 = entry["rows"].at(0).get<int64_t>();
            const int64_t r1 = entry["rows"].at(1).get<int64_t>();
            if (t.rank() < 1 || r0 < 0 || r1 > t.dim(0) || r0 >= r1) {
                throw std::runtime_error("checkpoint sidecar: bad row range for '" + name + "'");
            }
            const int64_t inner = t.numel() / t.dim(0);
            Shape s = t.shape();
            s[0] = r1 - r0;
            Tensor sliced(s);
            std::memcpy(sliced.data(), t.data() + r0 * inner, static_cast<size_t>((r1 - r0) * inner) * 8);
            t = std::move(sliced);
        }
        if (entry.value("squeeze", false)) t = squeeze_all(t);
        if (entry.value("transpose", false)) t = transpose_tensor(t);
        const Shape& want = ref_params[i].second->shape();
        if (t.shape() != want) {
            throw std::runtime_error("checkpoint: tensor for '" + name + "' has shape " + shape_str(t.shape()) +
                                     ", expected " + shape_str(want));
        }
        *dst_params[i].second = std::move(t);
    }
    return m;
}

}  // namespace ssmc
