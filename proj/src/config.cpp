#include "hnf/harness.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hnf {

namespace {

std::string trim(const std::string& s) {
    const std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    const std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

int64_t parse_i64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const int64_t v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key " + key + " expects an integer, got '" +
                                    value + "'");
    }
}

double parse_f64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key " + key + " expects a number, got '" + value +
                                    "'");
    }
}

std::vector<int64_t> parse_list(const std::string& key, std::string value) {
    if (!value.empty() && value.front() == '[') {
        if (value.back() != ']')
            throw std::invalid_argument("config key " + key + " has an unterminated list");
        value = value.substr(1, value.size() - 2);
    }
    std::vector<int64_t> out;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (item.empty())
            throw std::invalid_argument("config key " + key + " has an empty list element");
        out.push_back(parse_i64(key, item));
    }
    if (out.empty()) throw std::invalid_argument("config key " + key + " expects a list");
    return out;
}

std::string fmt_lossless(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_list(const std::vector<int64_t>& v) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(v[i]);
    }
    return out + "]";
}

}  // namespace

void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "d") cfg.d = parse_i64(key, value);
    else if (key == "batch") cfg.batch = parse_i64(key, value);
    else if (key == "epochs") cfg.epochs = parse_i64(key, value);
    else if (key == "lr") cfg.lr = parse_f64(key, value);
    else if (key == "patch_sizes") cfg.patch_sizes = parse_list(key, value);
    else if (key == "knn") cfg.knn = parse_list(key, value);
    else if (key == "k_cheb") cfg.k_cheb = parse_i64(key, value);
    else if (key == "h") cfg.h = parse_i64(key, value);
    else if (key == "d_h") cfg.d_h = parse_i64(key, value);
    else if (key == "folds") cfg.folds = parse_i64(key, value);
    else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_i64(key, value));
    else if (key == "plateau_patience") cfg.plateau_patience = parse_i64(key, value);
    else if (key == "lr_factor") cfg.lr_factor = parse_f64(key, value);
    else if (key == "early_stop_patience") cfg.early_stop_patience = parse_i64(key, value);
    else if (key == "mask_rate") cfg.mask_rate = parse_f64(key, value);
    else if (key == "aux_match_weight") cfg.aux_match_weight = parse_f64(key, value);
    else if (key == "image_hw") cfg.image_hw = parse_i64(key, value);
    else if (key == "enc_heads") cfg.enc_heads = parse_i64(key, value);
    else if (key == "ffn_hidden") cfg.ffn_hidden = parse_i64(key, value);
    else if (key == "ode_steps") cfg.ode_steps = parse_i64(key, value);
    else if (key == "lm_ffn") cfg.lm_ffn = parse_i64(key, value);
    else if (key == "lm_max_len") cfg.lm_max_len = parse_i64(key, value);
    else if (key == "lm_epochs") cfg.lm_epochs = parse_i64(key, value);
    else if (key == "fold_limit") cfg.fold_limit = parse_i64(key, value);
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

TrainConfig parse_config_text(const std::string& text, TrainConfig base) {
    std::istringstream in(text);
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        " is not key = value: '" + line + "'");
        apply_config_entry(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

TrainConfig load_config_file(const std::string& path, TrainConfig base) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot read config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), std::move(base));
}

std::string config_to_text(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "d = " << cfg.d << "\n";
    out << "batch = " << cfg.batch << "\n";
    out << "epochs = " << cfg.epochs << "\n";
    out << "lr = " << fmt_lossless(cfg.lr) << "\n";
    out << "patch_sizes = " << fmt_list(cfg.patch_sizes) << "\n";
    out << "knn = " << fmt_list(cfg.knn) << "\n";
    out << "k_cheb = " << cfg.k_cheb << "\n";
    out << "h = " << cfg.h << "\n";
    out << "d_h = " << cfg.d_h << "\n";
    out << "folds = " << cfg.folds << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "plateau_patience = " << cfg.plateau_patience << "\n";
    out << "lr_factor = " << fmt_lossless(cfg.lr_factor) << "\n";
    out << "early_stop_patience = " << cfg.early_stop_patience << "\n";
    out << "mask_rate = " << fmt_lossless(cfg.mask_rate) << "\n";
    out << "aux_match_weight = " << fmt_lossless(cfg.aux_match_weight) << "\n";
    out << "image_hw = " << cfg.image_hw << "\n";
    out << "enc_heads = " << cfg.enc_heads << "\n";
    out << "ffn_hidden = " << cfg.ffn_hidden << "\n";
    out << "ode_steps = " << cfg.ode_steps << "\n";
    out << "lm_ffn = " << cfg.lm_ffn << "\n";
    out << "lm_max_len = " << cfg.lm_max_len << "\n";
    out << "lm_epochs = " << cfg.lm_epochs << "\n";
    out << "fold_limit = " << cfg.fold_limit << "\n";
    return out.str();
}

void validate_config(const TrainConfig& cfg) {
    auto positive = [](const char* name, int64_t v) {
        if (v < 1)
            throw std::invalid_argument(std::string("config field ") + name +
                                        " must be positive, got " + std::to_string(v));
    };
    positive("d", cfg.d);
    positive("batch", cfg.batch);
    positive("epochs", cfg.epochs);
    positive("k_cheb", cfg.k_cheb);
    positive("h", cfg.h);
    positive("d_h", cfg.d_h);
    positive("plateau_patience", cfg.plateau_patience);
    positive("early_stop_patience", cfg.early_stop_patience);
    positive("image_hw", cfg.image_hw);
    positive("enc_heads", cfg.enc_heads);
    positive("ffn_hidden", cfg.ffn_hidden);
    positive("ode_steps", cfg.ode_steps);
    positive("lm_ffn", cfg.lm_ffn);
    positive("lm_max_len", cfg.lm_max_len);
    if (cfg.folds < 2)
        throw std::invalid_argument("config field folds must be at least 2, got " +
                                    std::to_string(cfg.folds));
    if (cfg.lr < 0.0) throw std::invalid_argument("config field lr must be non-negative");
    if (cfg.lr_factor <= 0.0 || cfg.lr_factor > 1.0)
        throw std::invalid_argument("config field lr_factor must lie in (0, 1]");
    if (cfg.mask_rate <= 0.0 || cfg.mask_rate >= 1.0)
        throw std::invalid_argument("config field mask_rate must lie in (0, 1)");
    if (cfg.aux_match_weight < 0.0)
        throw std::invalid_argument("config field aux_match_weight must be non-negative");
    if (cfg.lm_epochs < 0)
        throw std::invalid_argument("config field lm_epochs must be non-negative");
    if (cfg.fold_limit < 0)
        throw std::invalid_argument("config field fold_limit must be non-negative");
    if (cfg.patch_sizes.empty() || cfg.patch_sizes.size() != cfg.knn.size())
        throw std::invalid_argument("patch_sizes and knn must be non-empty lists of equal "
                                    "length");
    for (std::size_t i = 0; i < cfg.patch_sizes.size(); ++i) {
        positive("patch_sizes element", cfg.patch_sizes[i]);
        positive("knn element", cfg.knn[i]);
        if (cfg.image_hw % cfg.patch_sizes[i] != 0)
            throw std::invalid_argument("patch size " + std::to_string(cfg.patch_sizes[i]) +
                                        " does not divide image_hw=" +
                                        std::to_string(cfg.image_hw));
    }
    if (cfg.d % cfg.enc_heads != 0)
        throw std::invalid_argument("enc_heads=" + std::to_string(cfg.enc_heads) +
                                    " must divide d=" + std::to_string(cfg.d));
}

ModelSpec model_spec(const TrainConfig& cfg, int64_t channels) {
    ModelSpec ms;
    ms.vision.image_hw = cfg.image_hw;
    ms.vision.channels = channels;
    ms.vision.d = cfg.d;
    ms.vision.heads = cfg.enc_heads;
    ms.vision.ffn_hidden = cfg.ffn_hidden;
    ms.vision.ode_steps = cfg.ode_steps;
    ms.vision.ode_depth = 1;
    ms.vision.cheb_k = cfg.k_cheb;
    ms.vision.tie_directions = false;
    ms.vision.layers.clear();
    for (std::size_t i = 0; i < cfg.patch_sizes.size(); ++i)
        ms.vision.layers.push_back(HnfLayerSpec{cfg.patch_sizes[i], cfg.knn[i]});
    ms.fusion.d = cfg.d;
    ms.fusion.heads = cfg.h;
    ms.fusion.d_h = cfg.d_h;
    ms.lm.d = cfg.d;
    ms.lm.heads = cfg.enc_heads;
    ms.lm.ffn_hidden = cfg.lm_ffn;
    ms.lm.max_len = cfg.lm_max_len;
    return ms;
}

}  // namespace hnf
