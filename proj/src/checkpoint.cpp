#include "hnf/harness.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include "hnf/errors.hpp"

namespace hnf {

namespace {

constexpr char kMagic[8] = {'H', 'N', 'F', 'C', 'K', 'P', 'T', '1'};
constexpr std::size_t kHashBytes = 32;

using json = nlohmann::json;

std::array<unsigned char, kHashBytes> sha256(const std::string& bytes) {
    std::array<unsigned char, kHashBytes> md{};
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr);
    return md;
}

void append_le64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t read_le64(const std::string& bytes, std::size_t at) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    return v;
}

void append_tensor_bytes(std::string& out, const Tensor& t) {
    if (t.dtype() == DType::F32) {
        auto sp = t.data<float>();
        out.append(reinterpret_cast<const char*>(sp.data()), sp.size() * sizeof(float));
    } else {
        auto sp = t.data<double>();
        out.append(reinterpret_cast<const char*>(sp.data()), sp.size() * sizeof(double));
    }
}

std::string meta_path(const std::string& path) { return path + ".meta.json"; }

}  // namespace

void save_checkpoint(const ParamSet& params, const std::string& path) {
    json manifest = json::array();
    std::string data;
    for (const auto& [name, tensor] : params) {
        json entry;
        entry["name"] = name;
        entry["shape"] = tensor.shape();
        entry["dtype"] = dtype_name(tensor.dtype());
        entry["byte_offset"] = data.size();
        manifest.push_back(std::move(entry));
        append_tensor_bytes(data, tensor);
    }
    const std::string manifest_text = manifest.dump();

    std::string bytes;
    bytes.append(kMagic, sizeof kMagic);
    append_le64(bytes, manifest_text.size());
    bytes += manifest_text;
    bytes += data;
    const auto digest = sha256(bytes);
    bytes.append(reinterpret_cast<const char*>(digest.data()), digest.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
}

void save_checkpoint(const ParamSet& params, const std::string& path,
                     const CheckpointMeta& meta) {
    save_checkpoint(params, path);
    json side;
    side["config"] = meta.config_text;
    side["epoch"] = meta.epoch;
    side["label_names"] = meta.label_names;
    json hist = json::array();
    for (const MetricRow& r : meta.history)
        hist.push_back(json::array({r.fold, r.epoch, r.split, r.metric, r.value}));
    side["history"] = std::move(hist);
    std::ofstream out(meta_path(path), std::ios::binary | std::ios::trunc);
    out << side.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write checkpoint metadata " + meta_path(path));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptCheckpoint("cannot open checkpoint " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < sizeof kMagic + 8 + kHashBytes)
        throw CorruptCheckpoint("checkpoint " + path + " is truncated");
    if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw CorruptCheckpoint("checkpoint " + path + " has a bad magic header");

    const std::string body = bytes.substr(0, bytes.size() - kHashBytes);
    const auto digest = sha256(body);
    if (std::memcmp(digest.data(), bytes.data() + body.size(), kHashBytes) != 0)
        throw CorruptCheckpoint("checkpoint " + path + " failed its checksum");

    const uint64_t manifest_len = read_le64(bytes, sizeof kMagic);
    const std::size_t manifest_at = sizeof kMagic + 8;
    if (manifest_at + manifest_len > body.size())
        throw CorruptCheckpoint("checkpoint " + path + " declares an oversized manifest");

    json manifest;
    try {
        manifest = json::parse(bytes.substr(manifest_at, manifest_len));
    } catch (const json::exception& e) {
        throw CorruptCheckpoint("checkpoint " + path + " manifest is not valid JSON: " +
                                e.what());
    }
    if (!manifest.is_array())
        throw CorruptCheckpoint("checkpoint " + path + " manifest is not an array");

    const std::size_t data_at = manifest_at + manifest_len;
    const std::size_t data_len = body.size() - data_at;

    Checkpoint ckpt;
    try {
        for (const json& entry : manifest) {
            const std::string name = entry.at("name").get<std::string>();
            const Shape shape = entry.at("shape").get<Shape>();
            const std::string dt = entry.at("dtype").get<std::string>();
            const std::size_t offset = entry.at("byte_offset").get<std::size_t>();
            if (dt != "f32" && dt != "f64")
                throw CorruptCheckpoint("checkpoint " + path + " tensor " + name +
                                        " has unknown dtype " + dt);
            Tensor t(shape, dt == "f32" ? DType::F32 : DType::F64);
            const std::size_t nbytes =
                static_cast<std::size_t>(t.numel()) * dtype_size(t.dtype());
            if (offset + nbytes > data_len)
                throw CorruptCheckpoint("checkpoint " + path + " tensor " + name +
                                        " overruns the data section");
            const char* src = bytes.data() + data_at + offset;
            if (t.dtype() == DType::F32)
                std::memcpy(t.data<float>().data(), src, nbytes);
            else
                std::memcpy(t.data<double>().data(), src, nbytes);
            ckpt.params.emplace(name, std::move(t));
        }
    } catch (const json::exception& e) {
        throw CorruptCheckpoint("checkpoint " + path + " manifest entry is malformed: " +
                                e.what());
    }

    std::ifstream side(meta_path(path), std::ios::binary);
    if (side) {
        try {
            const json meta = json::parse(side);
            ckpt.meta.config_text = meta.value("config", std::string{});
            ckpt.meta.epoch = meta.value("epoch", int64_t{0});
            ckpt.meta.label_names =
                meta.value("label_names", std::vector<std::string>{});
            for (const json& row : meta.value("history", json::array()))
                ckpt.meta.history.push_back(MetricRow{row.at(0).get<int64_t>(),
                                                      row.at(1).get<int64_t>(),
                                                      row.at(2).get<std::string>(),
                                                      row.at(3).get<std::string>(),
                                                      row.at(4).get<double>()});
        } catch (const json::exception& e) {
            throw CorruptCheckpoint("checkpoint metadata " + meta_path(path) +
                                    " is malformed: " + e.what());
        }
    }
    return ckpt;
}

void ensure_compatible(const Checkpoint& ckpt, const TrainConfig& cfg) {
    if (!ckpt.meta.config_text.empty()) {
        const TrainConfig saved = parse_config_text(ckpt.meta.config_text);
        auto mismatch = [](const std::string& field, const std::string& got,
                           const std::string& want) {
            throw IncompatibleConfig("checkpoint " + field + " is " + got +
                                     " but the active config wants " + want);
        };
        if (saved.d != cfg.d)
            mismatch("d", std::to_string(saved.d), std::to_string(cfg.d));
        if (saved.patch_sizes != cfg.patch_sizes || saved.knn != cfg.knn)
            mismatch("patch layout", config_to_text(saved), config_to_text(cfg));
        if (saved.k_cheb != cfg.k_cheb)
            mismatch("k_cheb", std::to_string(saved.k_cheb), std::to_string(cfg.k_cheb));
        if (saved.h != cfg.h || saved.d_h != cfg.d_h)
            mismatch("fusion geometry", std::to_string(saved.h) + "x" + std::to_string(saved.d_h),
                     std::to_string(cfg.h) + "x" + std::to_string(cfg.d_h));
        if (saved.image_hw != cfg.image_hw)
            mismatch("image_hw", std::to_string(saved.image_hw), std::to_string(cfg.image_hw));
        return;
    }
    const auto it = ckpt.params.find("fusion.w_cls");
    if (it != ckpt.params.end() && it->second.dim(0) != cfg.d)
        throw IncompatibleConfig("checkpoint fusion.w_cls implies d=" +
                                 std::to_string(it->second.dim(0)) +
                                 " but the active config wants d=" + std::to_string(cfg.d));
}

}  // namespace hnf
