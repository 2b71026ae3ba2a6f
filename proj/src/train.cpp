#include "hnf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "hnf/errors.hpp"
#include "hnf/expr.hpp"
#include "hnf/optim.hpp"
#include "hnf/rng.hpp"

namespace hnf {

namespace {

void shuffle_indices(std::vector<int64_t>& v, std::mt19937_64& g) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
        const int64_t j = std::min<int64_t>(i, rng_index(g, i + 1));
        std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
}

// Graph heads shared by the training objective and inference for one item.
struct ItemGraph {
    Expr h_fus;
    Expr scores;       // {1, c}
    Expr match_probs;  // {1, c}
};

ItemGraph build_item_graph(const Micrograph& item, const ModelSpec& ms,
                           const std::vector<Expr>& h_text, Session& s) {
    ItemGraph ig;
    HnfOut v = hnf_forward(item, ms.vision, s);
    ig.h_fus = v.h_fus;
    Expr vcol = reshape(leaf("text.v", {ms.vision.d}), {ms.vision.d, 1});
    ig.scores = match_scores_expr(ig.h_fus, h_text, std::move(vcol));
    ig.match_probs = softmax(ig.scores, 1);
    return ig;
}

Expr classifier_probs(const ItemGraph& ig, const Expr& h_text_sel, const ModelSpec& ms,
                      int64_t classes) {
    CrossModalOut cm = cross_modal_attention_expr(h_text_sel, ig.h_fus, ms.fusion);
    return classify_expr(cm.y_cross, leaf("fusion.w_cls", {ms.fusion.d, classes}));
}

Expr item_loss(const ItemGraph& ig, const Expr& probs, int64_t label, double aux_weight) {
    Expr ce = scalar_mul(-1.0, log_(pick(probs, 0, label)));
    Expr aux = scalar_mul(-aux_weight, log_(pick(ig.match_probs, 0, label)));
    return add(std::move(ce), std::move(aux));
}

Micrograph with_channels(const Micrograph& item, int64_t channels) {
    if (item.pixels.dim(2) == channels) return item;
    Micrograph out;
    out.pixels = convert_channels(item.pixels, channels);
    out.label = item.label;
    out.source_id = item.source_id;
    return out;
}

std::string first_nonfinite_param(const std::map<std::string, Tensor>& grads,
                                  const ParamSet& params) {
    for (const auto& [name, g] : grads)
        for (int64_t i = 0; i < g.numel(); ++i)
            if (!std::isfinite(g.at(i))) return name;
    for (const auto& [name, p] : params)
        for (int64_t i = 0; i < p.numel(); ++i)
            if (!std::isfinite(p.at(i))) return name;
    return "loss";
}

// Inference state shared by predict_probabilities and evaluate_model: the
// bank embeddings come out of the checkpoint as constants.
struct InferenceEngine {
    TrainConfig cfg;
    ModelSpec ms;
    int64_t classes = 0;
    int64_t channels = 0;
    std::vector<Expr> h_text;
    const ParamSet* params = nullptr;

    explicit InferenceEngine(const Checkpoint& ckpt) {
        if (!ckpt.meta.config_text.empty()) cfg = parse_config_text(ckpt.meta.config_text);
        const auto wcls = ckpt.params.find("fusion.w_cls");
        if (wcls == ckpt.params.end())
            throw IncompatibleConfig("checkpoint lacks the fusion.w_cls classifier table");
        classes = wcls->second.dim(1);
        const auto we = ckpt.params.find("layers.0.patch.w_e");
        if (we == ckpt.params.end())
            throw IncompatibleConfig("checkpoint lacks the layers.0.patch.w_e projection");
        const int64_t p0 = cfg.patch_sizes.at(0);
        channels = we->second.dim(0) / (p0 * p0);
        ms = model_spec(cfg, channels);
        for (int64_t k = 0; k < classes; ++k) {
            const std::string name = "bank." + std::to_string(k);
            const auto it = ckpt.params.find(name);
            if (it == ckpt.params.end())
                throw IncompatibleConfig("checkpoint lacks the text embedding " + name);
            if (it->second.numel() != cfg.d)
                throw IncompatibleConfig("checkpoint entry " + name + " has " +
                                         std::to_string(it->second.numel()) +
                                         " elements, expected d=" + std::to_string(cfg.d));
            Tensor row({1, cfg.d}, it->second.dtype());
            for (int64_t i = 0; i < cfg.d; ++i) row.set(i, it->second.at(i));
            h_text.push_back(constant(std::move(row)));
        }
        params = &ckpt.params;
    }

    Tensor probabilities(const Micrograph& item, Session& s) const {
        const Micrograph conv = with_channels(item, channels);
        ItemGraph ig = build_item_graph(conv, ms, h_text, s);
        const Tensor scores = eval(ig.scores, s);
        const int64_t beta = argmax_index(scores);
        Expr probs = classifier_probs(ig, h_text[static_cast<std::size_t>(beta)], ms, classes);
        const Tensor p = eval(probs, s);
        Tensor flat({classes}, p.dtype());
        for (int64_t i = 0; i < classes; ++i) flat.set(i, p.at(i));
        return flat;
    }
};

}  // namespace

ParamSet init_model_params(const TrainConfig& cfg, int64_t classes, int64_t channels,
                           const SmallLM& lm, uint64_t seed) {
    const ModelSpec ms = model_spec(cfg, channels);
    ParamSet ps;
    init_hnf_params(ps, ms.vision, seed, DType::F64);
    init_fusion_params(ps, ms.fusion, classes, seed, "fusion.", DType::F64);
    for (const auto& [name, t] : lm.params) ps[name] = t;
    ps["text.u"] = xavier_uniform({cfg.d}, seed, "text.u", DType::F64);
    ps["text.v"] = xavier_uniform({cfg.d}, seed, "text.v", DType::F64);
    return ps;
}

TrainResult train_model(const Dataset& ds, const TrainConfig& cfg,
                        const std::string& fixture_path) {
    validate_config(cfg);
    if (ds.items.empty()) throw TooFewItems("dataset has no items");
    const int64_t classes = ds.classes();
    if (classes < 2) throw TooFewItems("training needs at least two classes");
    const int64_t channels = ds.items[0].pixels.dim(2);
    const ModelSpec ms = model_spec(cfg, channels);

    TrainResult result;

    const TextCorpus corpus = build_corpus(load_fixture(fixture_path));
    SmallLM lm = init_small_lm(ms.lm, corpus.vocab_size(), cfg.seed);
    if (cfg.lm_epochs > 0)
        lm = mlm_pretrain(corpus, lm, cfg.mask_rate, cfg.lm_epochs, cfg.seed);

    // One bank graph per dataset category; labels with no fixture text fall
    // back to a zero embedding.
    const BankExprs bank = build_bank_exprs(corpus, ms.lm);
    std::vector<Expr> h_text;
    for (const std::string& name : ds.label_names) {
        const auto it = std::find(bank.categories.begin(), bank.categories.end(), name);
        if (it == bank.categories.end()) {
            result.warnings.push_back("category " + name +
                                      " has no fixture text; using a zero embedding");
            h_text.push_back(constant(Tensor::zeros({1, cfg.d}, DType::F64)));
        } else {
            h_text.push_back(bank.h_text[static_cast<std::size_t>(
                std::distance(bank.categories.begin(), it))]);
        }
    }

    const std::vector<FoldSplit> folds = kfold_split(ds, cfg.folds, cfg.seed);
    const int64_t fold_count =
        cfg.fold_limit > 0
            ? std::min<int64_t>(cfg.fold_limit, static_cast<int64_t>(folds.size()))
            : static_cast<int64_t>(folds.size());

    double overall_best = std::numeric_limits<double>::infinity();

    for (int64_t f = 0; f < fold_count; ++f) {
        const FoldSplit& fold = folds[static_cast<std::size_t>(f)];
        ParamSet params =
            init_model_params(cfg, classes, channels, lm, cfg.seed + 7919 * static_cast<uint64_t>(f));
        std::vector<std::string> wanted;
        for (const auto& [name, t] : params) wanted.push_back(name);

        AdamOpt opt(cfg.lr);
        double lr_now = cfg.lr;
        double best_val = std::numeric_limits<double>::infinity();
        ParamSet best_params = params;
        int64_t best_epoch = 0;
        int64_t plateau = 0, stall = 0;
        std::vector<MetricRow> fold_rows;

        for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            Session s;
            s.dtype = DType::F64;
            s.bind_all(params);
            for (const Expr& e : h_text) eval(e, s);
            const auto bank_cache = s.cache;

            std::vector<int64_t> order = fold.train;
            std::mt19937_64 g = named_rng(cfg.seed, "order." + std::to_string(f) + "." +
                                                        std::to_string(epoch));
            shuffle_indices(order, g);

            double train_loss = 0.0;
            int64_t train_hits = 0;
            int64_t batch_index = 0;
            for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch)) {
                const std::size_t stop =
                    std::min(order.size(), at + static_cast<std::size_t>(cfg.batch));
                std::map<std::string, Tensor> acc;
                for (std::size_t bi = at; bi < stop; ++bi) {
                    const Micrograph item =
                        with_channels(ds.items[static_cast<std::size_t>(order[bi])], channels);
                    double lv = 0.0;
                    std::map<std::string, Tensor> gmap;
                    Expr probs;
                    try {
                        ItemGraph ig = build_item_graph(item, ms, h_text, s);
                        probs = classifier_probs(
                            ig, h_text[static_cast<std::size_t>(item.label)], ms, classes);
                        Expr loss = item_loss(ig, probs, item.label, cfg.aux_match_weight);
                        lv = eval_scalar(loss, s);
                        gmap = grad(loss, s, wanted);
                    } catch (const NonFiniteState& e) {
                        throw NonFiniteLoss(
                            "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(batch_index) + " (parameter " +
                            first_nonfinite_param({}, params) + "): " + e.what());
                    }
                    if (!std::isfinite(lv))
                        throw NonFiniteLoss(
                            "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(batch_index) + " (parameter " +
                            first_nonfinite_param(gmap, params) + ")");
                    train_loss += lv;
                    if (argmax_index(eval(probs, s)) == item.label) ++train_hits;
                    for (auto& [name, gt] : gmap) {
                        const auto it = acc.find(name);
                        if (it == acc.end()) {
                            acc.emplace(name, std::move(gt));
                        } else {
                            Tensor& dst = it->second;
                            for (int64_t i = 0; i < dst.numel(); ++i)
                                dst.set(i, dst.at(i) + gt.at(i));
                        }
                    }
                    s.cache = bank_cache;
                }
                const double inv = 1.0 / static_cast<double>(stop - at);
                for (auto& [name, gt] : acc)
                    for (int64_t i = 0; i < gt.numel(); ++i) gt.set(i, gt.at(i) * inv);
                for (const auto& [name, gt] : acc)
                    for (int64_t i = 0; i < gt.numel(); ++i)
                        if (!std::isfinite(gt.at(i)))
                            throw NonFiniteLoss("non-finite gradient at epoch " +
                                                std::to_string(epoch) + " batch " +
                                                std::to_string(batch_index) + " (parameter " +
                                                name + ")");
                opt.lr = lr_now;
                opt.step(params, acc);
                s.bind_all(params);
                s.cache = bank_cache;
                ++batch_index;
            }
            train_loss /= static_cast<double>(order.size());

            double val_loss = 0.0;
            int64_t val_hits = 0;
            try {
                for (int64_t idx : fold.val) {
                    const Micrograph item =
                        with_channels(ds.items[static_cast<std::size_t>(idx)], channels);
                    ItemGraph ig = build_item_graph(item, ms, h_text, s);
                    Expr forced = classifier_probs(
                        ig, h_text[static_cast<std::size_t>(item.label)], ms, classes);
                    val_loss +=
                        eval_scalar(item_loss(ig, forced, item.label, cfg.aux_match_weight), s);
                    const int64_t beta = argmax_index(eval(ig.scores, s));
                    Expr chosen = classifier_probs(
                        ig, h_text[static_cast<std::size_t>(beta)], ms, classes);
                    if (argmax_index(eval(chosen, s)) == item.label) ++val_hits;
                    s.cache = bank_cache;
                }
            } catch (const NonFiniteState& e) {
                throw NonFiniteLoss("non-finite validation loss at epoch " +
                                    std::to_string(epoch) + " batch " +
                                    std::to_string(batch_index) + " (parameter " +
                                    first_nonfinite_param({}, params) + "): " + e.what());
            }
            val_loss /= static_cast<double>(fold.val.size());
            if (!std::isfinite(val_loss))
                throw NonFiniteLoss("non-finite validation loss at epoch " +
                                    std::to_string(epoch) + " batch 0 (parameter loss)");

            fold_rows.push_back({f, epoch, "train", "loss", train_loss});
            fold_rows.push_back({f, epoch, "train", "top1",
                                 static_cast<double>(train_hits) /
                                     static_cast<double>(order.size())});
            fold_rows.push_back({f, epoch, "train", "lr", lr_now});
            fold_rows.push_back({f, epoch, "val", "loss", val_loss});
            fold_rows.push_back({f, epoch, "val", "top1",
                                 static_cast<double>(val_hits) /
                                     static_cast<double>(fold.val.size())});

            if (val_loss < best_val) {
                best_val = val_loss;
                best_params = params;
                best_epoch = epoch;
                plateau = 0;
                stall = 0;
            } else {
                ++plateau;
                ++stall;
                if (plateau >= cfg.plateau_patience) {
                    lr_now *= cfg.lr_factor;
                    plateau = 0;
                }
                if (stall >= cfg.early_stop_patience) break;
            }
        }

        // Bake the text bank of the winning parameters into the fold artifact.
        Session bs;
        bs.dtype = DType::F64;
        bs.bind_all(best_params);
        ParamSet ckpt_params = best_params;
        for (std::size_t k = 0; k < h_text.size(); ++k) {
            const Tensor row = eval(h_text[k], bs);
            Tensor flat({cfg.d}, DType::F64);
            for (int64_t i = 0; i < cfg.d; ++i) flat.set(i, row.at(i));
            ckpt_params["bank." + std::to_string(k)] = std::move(flat);
        }

        result.history.insert(result.history.end(), fold_rows.begin(), fold_rows.end());
        if (best_val < overall_best) {
            overall_best = best_val;
            result.best.params = std::move(ckpt_params);
            result.best.meta.config_text = config_to_text(cfg);
            result.best.meta.epoch = best_epoch;
            result.best.meta.label_names = ds.label_names;
            result.best.meta.history = fold_rows;
        }
    }
    return result;
}

Tensor predict_probabilities(const Micrograph& item, const Checkpoint& ckpt) {
    const InferenceEngine engine(ckpt);
    Session s;
    s.dtype = DType::F64;
    s.bind_all(ckpt.params);
    return engine.probabilities(item, s);
}

EvalReport evaluate_model(const Checkpoint& ckpt, const Dataset& ds,
                          const std::vector<int64_t>& split) {
    if (split.empty()) throw EmptySplit("evaluate_model received an empty split");
    const InferenceEngine engine(ckpt);
    if (ds.classes() != engine.classes)
        throw IncompatibleConfig("checkpoint classifies " + std::to_string(engine.classes) +
                                 " classes but the dataset has " +
                                 std::to_string(ds.classes()));

    Session s;
    s.dtype = DType::F64;
    s.bind_all(ckpt.params);

    std::vector<Tensor> probs;
    std::vector<int64_t> labels;
    EvalReport report;
    report.confusion.assign(static_cast<std::size_t>(engine.classes),
                            std::vector<int64_t>(static_cast<std::size_t>(engine.classes), 0));
    for (int64_t idx : split) {
        if (idx < 0 || idx >= static_cast<int64_t>(ds.items.size()))
            throw EmptySplit("split index " + std::to_string(idx) + " is out of range");
        const Micrograph& item = ds.items[static_cast<std::size_t>(idx)];
        Tensor p = engine.probabilities(item, s);
        const int64_t pred = argmax_index(p);
        report.confusion[static_cast<std::size_t>(item.label)][static_cast<std::size_t>(pred)]++;
        probs.push_back(std::move(p));
        labels.push_back(item.label);
    }

    for (const int64_t n : {1, 2, 3, 5}) {
        if (n > engine.classes) {
            report.notes.push_back("top" + std::to_string(n) + " skipped: only " +
                                   std::to_string(engine.classes) + " classes");
            continue;
        }
        report.topn[n] = topn_accuracy(probs, labels, n);
    }
    report.prf = prf_from_confusion(report.confusion);
    return report;
}

}  // namespace hnf
