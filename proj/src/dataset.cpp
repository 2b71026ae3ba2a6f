#include "hnf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <stdexcept>

#include "hnf/errors.hpp"
#include "hnf/rng.hpp"

namespace fs = std::filesystem;

namespace hnf {

namespace {

bool image_extension(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

void fisher_yates(std::vector<int64_t>& v, std::mt19937_64& g) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
        const int64_t j = std::min<int64_t>(i, rng_index(g, i + 1));
        std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
}

double texture_value(int64_t family, int64_t r, int64_t c, int64_t period) {
    const int64_t half = period / 2;
    switch (family) {
        case 0: {  // stripes
            return (r / half) % 2 == 0 ? 0.85 : 0.15;
        }
        case 1: {  // dots
            const int64_t dr = r % period - half;
            const int64_t dc = c % period - half;
            const int64_t rad = period / 4;
            return dr * dr + dc * dc <= rad * rad ? 0.85 : 0.15;
        }
        default: {  // checker
            return ((r / half) + (c / half)) % 2 == 0 ? 0.85 : 0.15;
        }
    }
}

}  // namespace

Dataset ingest_dataset(const std::string& root) {
    if (!fs::is_directory(root))
        throw EmptyCategory("dataset root " + root + " is not a directory");
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    if (dirs.empty()) throw EmptyCategory("no category directories under " + root);

    Dataset ds;
    ds.provenance = Provenance::disk;
    for (const fs::path& dir : dirs) {
        const std::string category = dir.filename().string();
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file() && image_extension(entry.path()))
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw EmptyCategory("category " + category + " has no images");
        const int label = static_cast<int>(ds.label_names.size());
        ds.label_names.push_back(category);
        for (const fs::path& file : files) {
            Micrograph item;
            item.pixels = decode_image(file.string());
            item.label = label;
            item.source_id = category + "/" + file.filename().string();
            ds.items.push_back(std::move(item));
        }
    }
    return ds;
}

Dataset generate_synthetic_dataset(int64_t classes, int64_t per_class, int64_t size,
                                   uint64_t seed) {
    if (classes < 2 || classes > 10)
        throw std::invalid_argument("synthetic classes must lie in [2, 10], got " +
                                    std::to_string(classes));
    if (per_class < 1) throw std::invalid_argument("per_class must be positive");
    if (size < 8) throw std::invalid_argument("synthetic image size must be at least 8");

    static const char* kFamilies[3] = {"stripes", "dots", "checker"};
    std::vector<std::pair<std::string, int64_t>> named;  // (name, pattern index k)
    for (int64_t k = 0; k < classes; ++k) {
        const int64_t variant = k / 3;
        std::string name = kFamilies[k % 3];
        if (variant > 0) name += std::to_string(variant + 1);
        named.emplace_back(std::move(name), k);
    }
    std::sort(named.begin(), named.end());

    Dataset ds;
    ds.provenance = Provenance::synthetic;
    for (const auto& [name, k] : named) {
        const int label = static_cast<int>(ds.label_names.size());
        ds.label_names.push_back(name);
        const int64_t family = k % 3;
        const int64_t variant = k / 3;
        const int64_t period = std::max<int64_t>(4, 2 * ((size * (variant + 1)) / 16));
        for (int64_t i = 0; i < per_class; ++i) {
            std::mt19937_64 g = named_rng(seed, "synth." + name + "." + std::to_string(i));
            const int64_t off_r = rng_index(g, period);
            const int64_t off_c = rng_index(g, period);
            Micrograph item;
            item.pixels = Tensor({size, size, 1}, DType::F64);
            for (int64_t r = 0; r < size; ++r)
                for (int64_t c = 0; c < size; ++c) {
                    double v = texture_value(family, r + off_r, c + off_c, period);
                    v += rng_uniform_range(g, -0.05, 0.05);
                    item.pixels.set(r * size + c, std::clamp(v, 0.0, 1.0));
                }
            item.label = label;
            char idx[16];
            std::snprintf(idx, sizeof idx, "%04lld", static_cast<long long>(i));
            item.source_id = "synthetic/" + name + "/" + idx;
            ds.items.push_back(std::move(item));
        }
    }
    return ds;
}

std::vector<FoldSplit> kfold_split(const Dataset& ds, int64_t k, uint64_t seed) {
    if (k < 2) throw std::invalid_argument("kfold_split needs k >= 2");
    const int64_t n = static_cast<int64_t>(ds.items.size());
    if (n == 0) throw TooFewItems("cannot split an empty dataset");

    std::map<int, std::vector<int64_t>> by_label;
    for (int64_t i = 0; i < n; ++i) by_label[ds.items[static_cast<std::size_t>(i)].label].push_back(i);

    for (const auto& [label, idx] : by_label)
        if (static_cast<int64_t>(idx.size()) < k)
            throw TooFewItems("class " + std::to_string(label) + " has " +
                              std::to_string(idx.size()) + " items, fewer than k=" +
                              std::to_string(k));

    std::vector<std::vector<int64_t>> val(static_cast<std::size_t>(k));
    for (const auto& [label, idx] : by_label) {
        std::vector<int64_t> order = idx;
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return ds.items[static_cast<std::size_t>(a)].source_id <
                   ds.items[static_cast<std::size_t>(b)].source_id;
        });
        // Anchor the deal on (label, seed) so membership survives any
        // permutation of the input items.
        std::vector<int64_t> slots(order.size());
        std::iota(slots.begin(), slots.end(), 0);
        std::mt19937_64 g = named_rng(seed, "kfold." + std::to_string(label));
        fisher_yates(slots, g);
        for (std::size_t p = 0; p < order.size(); ++p)
            val[static_cast<std::size_t>(slots[p] % k)].push_back(order[p]);
    }

    std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
    for (int64_t f = 0; f < k; ++f) {
        auto& fold = folds[static_cast<std::size_t>(f)];
        fold.val = val[static_cast<std::size_t>(f)];
        std::sort(fold.val.begin(), fold.val.end());
        for (int64_t i = 0; i < n; ++i)
            if (!std::binary_search(fold.val.begin(), fold.val.end(), i)) fold.train.push_back(i);
    }
    return folds;
}

}  // namespace hnf
