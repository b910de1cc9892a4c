#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "modula/training.hpp"

namespace modula {

constexpr int kCheckpointFormatVersion = 1;

/// On-disk layout: <dir>/manifest.json (UTF-8 JSON) plus
/// <dir>/tensors.bin (raw little-endian float32, concatenated in
/// manifest order). State is held in float64 but stored in float32;
/// loading therefore reproduces forwards to ~1e-6 while save->load->save
/// is byte-identical (float32 round-trips exactly).
namespace detail {

inline void append_f32_le(std::string& blob, double v) {
    float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    blob.push_back(static_cast<char>(bits & 0xff));
    blob.push_back(static_cast<char>((bits >> 8) & 0xff));
    blob.push_back(static_cast<char>((bits >> 16) & 0xff));
    blob.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline double read_f32_le(const std::string& blob, size_t off) {
    uint32_t bits = static_cast<uint8_t>(blob[off]) | (static_cast<uint32_t>(static_cast<uint8_t>(blob[off + 1])) << 8) |
                    (static_cast<uint32_t>(static_cast<uint8_t>(blob[off + 2])) << 16) |
                    (static_cast<uint32_t>(static_cast<uint8_t>(blob[off + 3])) << 24);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return static_cast<double>(f);
}

}  // namespace detail

inline void save_checkpoint(TrainState& s, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string blob;
    nlohmann::json tensors = nlohmann::json::array();
    for (auto& nt : enumerate_tensors(s)) {
        size_t offset = blob.size();
        for (double v : nt.tensor->data) detail::append_f32_le(blob, v);
        tensors.push_back({{"name", nt.name},
                           {"shape", nt.tensor->shape},
                           {"role", nt.role},
                           {"trainable", nt.tensor->requires_grad},
                           {"offset", offset},
                           {"count", nt.tensor->numel()},
                           {"hash", hash_hex(fnv1a64(blob.data() + offset, blob.size() - offset))}});
    }
    nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion},
                               {"stage", {{"kind", stage_kind_name(s.stage.kind)}, {"domain_tag", s.stage.domain_tag}}},
                               {"step", s.step},
                               {"seed", s.seed},
                               {"config", to_json(s.config)},
                               {"tensors", tensors}};
    {
        std::ofstream out(dir / "manifest.json", std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
        out << manifest.dump(2) << "\n";
    }
    {
        std::ofstream out(dir / "tensors.bin", std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + (dir / "tensors.bin").string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
}

inline TrainState load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream min(dir / "manifest.json", std::ios::binary);
    if (!min) throw std::runtime_error("cannot read checkpoint manifest: " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        min >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint manifest is not valid JSON: " + std::string(e.what()));
    }

    int version = manifest.value("format_version", -1);
    if (version != kCheckpointFormatVersion)
        throw std::runtime_error("checkpoint format version " + std::to_string(version) +
                                 " unsupported, this build reads version " +
                                 std::to_string(kCheckpointFormatVersion));

    RunConfig cfg = run_config_from_json(manifest.at("config"));
    cfg.validate();
    TrainState s = init_state_skeleton(cfg);
    s.seed = manifest.value("seed", cfg.seed);
    s.step = manifest.value("step", static_cast<int64_t>(0));
    s.stage.kind = stage_kind_from(manifest.at("stage").at("kind").get<std::string>());
    s.stage.domain_tag = manifest.at("stage").value("domain_tag", std::string());

    // Materialize domain experts and routers from the manifest names, in
    // manifest order.
    for (const auto& t : manifest.at("tensors")) {
        std::string name = t.at("name").get<std::string>();
        if (name.rfind("stack.", 0) != 0) continue;
        std::string rest = name.substr(6);  // "L0.attn_q.expert.math.A"
        size_t dot1 = rest.find('.');
        size_t dot2 = rest.find('.', dot1 + 1);
        if (dot1 == std::string::npos || dot2 == std::string::npos)
            throw std::runtime_error("checkpoint: malformed tensor name " + name);
        int layer = std::stoi(rest.substr(1, dot1 - 1));
        SiteTag tag = site_tag_from(rest.substr(dot1 + 1, dot2 - dot1 - 1));
        std::string item = rest.substr(dot2 + 1);
        auto it = s.stacks.find(SiteRef{layer, tag});
        if (it == s.stacks.end())
            throw std::runtime_error("checkpoint: tensor " + name + " names a site absent from the config");
        AdapterStack& st = it->second;
        std::vector<int> shape = t.at("shape").get<std::vector<int>>();
        if (item.rfind("expert.", 0) == 0 && item.size() > 9 && item.substr(item.size() - 2) == ".A") {
            std::string tag_name = item.substr(7, item.size() - 9);
            if (st.find_expert(tag_name) < 0) {
                if (shape.size() != 2) throw std::runtime_error("checkpoint: bad expert shape for " + name);
                add_expert(st, tag_name, shape[0], cfg.domain_alpha_or_default(), /*seed=*/0);
            }
        } else if (item == "router.W") {
            if (shape.size() != 2) throw std::runtime_error("checkpoint: bad router shape for " + name);
            if (!st.router) st.router = Router{Tensor::zeros(shape)};
        }
    }

    // The rebuilt structure must enumerate exactly like the saved one.
    std::vector<NamedTensor> names = enumerate_tensors(s);
    const auto& tensors = manifest.at("tensors");
    if (names.size() != tensors.size())
        throw std::runtime_error("checkpoint: tensor count mismatch (" + std::to_string(names.size()) +
                                 " rebuilt vs " + std::to_string(tensors.size()) + " in manifest)");

    std::string blob;
    {
        std::ifstream in(dir / "tensors.bin", std::ios::binary);
        if (!in) throw std::runtime_error("cannot read checkpoint blob: " + (dir / "tensors.bin").string());
        std::ostringstream ss;
        ss << in.rdbuf();
        blob = ss.str();
    }

    for (size_t i = 0; i < names.size(); ++i) {
        const auto& t = tensors[i];
        std::string name = t.at("name").get<std::string>();
        if (name != names[i].name)
            throw std::runtime_error("checkpoint: tensor order mismatch at index " + std::to_string(i) +
                                     ": rebuilt " + names[i].name + " vs manifest " + name);
        std::vector<int> shape = t.at("shape").get<std::vector<int>>();
        if (shape != names[i].tensor->shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        size_t offset = t.at("offset").get<size_t>();
        int64_t count = t.at("count").get<int64_t>();
        if (count != names[i].tensor->numel())
            throw std::runtime_error("checkpoint: element count mismatch for " + name);
        if (offset + static_cast<size_t>(count) * 4 > blob.size())
            throw std::runtime_error("checkpoint: blob too short for tensor " + name);
        uint64_t h = fnv1a64(blob.data() + offset, static_cast<size_t>(count) * 4);
        if (hash_hex(h) != t.at("hash").get<std::string>())
            throw std::runtime_error("checkpoint: content hash mismatch for tensor " + name +
                                     " (corrupted blob)");
        for (int64_t j = 0; j < count; ++j)
            names[i].tensor->data[static_cast<size_t>(j)] =
                detail::read_f32_le(blob, offset + static_cast<size_t>(j) * 4);
        names[i].tensor->requires_grad = t.at("trainable").get<bool>();
        names[i].tensor->clear_grad();
    }

    // stage-2 states carry their active expert selection implicitly
    if (s.stage.kind == StageKind::stage2)
        for (auto& [ref, st] : s.stacks) st.active_expert_override = st.find_expert(s.stage.domain_tag);
    return s;
}

}  // namespace modula
