#include <cstdio>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hnf/errors.hpp"
#include "hnf/expr.hpp"
#include "hnf/harness.hpp"
#include "hnf/rng.hpp"

namespace fs = std::filesystem;
using namespace hnf;

namespace {

struct DatasetFlags {
    std::string data_dir;
    int64_t synthetic = 0;
    int64_t per_class = 10;
    int64_t size = 64;
};

void add_dataset_flags(CLI::App& cmd, DatasetFlags& flags) {
    auto* data = cmd.add_option("--data", flags.data_dir,
                                "Dataset root with one directory per category");
    auto* syn = cmd.add_option("--synthetic", flags.synthetic,
                               "Generate a synthetic dataset with this many classes");
    cmd.add_option("--per-class", flags.per_class, "Synthetic items per class");
    cmd.add_option("--size", flags.size, "Synthetic image edge length");
    data->excludes(syn);
}

Dataset resolve_dataset(const DatasetFlags& flags, uint64_t seed) {
    if (!flags.data_dir.empty()) return ingest_dataset(flags.data_dir);
    if (flags.synthetic > 0)
        return generate_synthetic_dataset(flags.synthetic, flags.per_class, flags.size, seed);
    throw std::invalid_argument("pass either --data DIR or --synthetic N");
}

TrainConfig resolve_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path, cfg);
    for (const std::string& kv : overrides) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
        apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    validate_config(cfg);
    return cfg;
}

void print_report(const EvalReport& rep, const std::vector<std::string>& label_names) {
    for (const auto& [n, acc] : rep.topn)
        std::printf("top-%lld accuracy: %.4f\n", static_cast<long long>(n), acc);
    for (const std::string& note : rep.notes) std::printf("note: %s\n", note.c_str());
    std::printf("macro precision/recall/f1: %.4f %.4f %.4f\n", rep.prf.macro_precision,
                rep.prf.macro_recall, rep.prf.macro_f1);
    for (std::size_t k = 0; k < rep.prf.precision.size(); ++k)
        std::printf("class %-12s p=%.4f r=%.4f f1=%.4f%s\n",
                    k < label_names.size() ? label_names[k].c_str() : "?",
                    rep.prf.precision[k], rep.prf.recall[k], rep.prf.f1[k],
                    rep.prf.zero_division[k] ? " (zero denominator)" : "");
    std::printf("confusion matrix (rows = true):\n");
    for (const auto& row : rep.confusion) {
        for (int64_t v : row) std::printf(" %5lld", static_cast<long long>(v));
        std::printf("\n");
    }
}

int run_train(const DatasetFlags& dflags, const std::string& config_path,
              const std::vector<std::string>& overrides, const std::string& fixture,
              const std::string& out_dir) {
    const TrainConfig cfg = resolve_config(config_path, overrides);
    const Dataset ds = resolve_dataset(dflags, cfg.seed);
    std::printf("dataset: %zu items, %lld classes\n", ds.items.size(),
                static_cast<long long>(ds.classes()));

    const TrainResult result = train_model(ds, cfg, fixture);
    for (const std::string& w : result.warnings) std::printf("warning: %s\n", w.c_str());

    fs::create_directories(out_dir);
    const std::string ckpt_path = (fs::path(out_dir) / "model.ckpt").string();
    save_checkpoint(result.best.params, ckpt_path, result.best.meta);
    const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    write_metrics_csv(metrics_path, result.history);

    double best = 0.0;
    for (const MetricRow& r : result.best.meta.history)
        if (r.split == "val" && r.metric == "loss" && r.epoch == result.best.meta.epoch)
            best = r.value;
    std::printf("best fold: val loss %.6f at epoch %lld\n", best,
                static_cast<long long>(result.best.meta.epoch));
    std::printf("checkpoint: %s\nmetrics: %s\n", ckpt_path.c_str(), metrics_path.c_str());
    return 0;
}

int run_eval(const std::string& ckpt_path, const DatasetFlags& dflags) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    TrainConfig cfg;
    if (!ckpt.meta.config_text.empty()) cfg = parse_config_text(ckpt.meta.config_text);
    const Dataset ds = resolve_dataset(dflags, cfg.seed);
    std::vector<int64_t> split(ds.items.size());
    std::iota(split.begin(), split.end(), 0);
    const EvalReport rep = evaluate_model(ckpt, ds, split);
    print_report(rep, ds.label_names);
    return 0;
}

int run_describe(const std::string& category, const std::string& mode,
                 const std::string& fixture, const std::string& endpoint,
                 const std::string& model) {
    const PromptSuite suite = render_cot_prompts(category);
    FetchOptions opt;
    opt.mode = mode == "live" ? ClientMode::live : ClientMode::replay;
    opt.fixture_path = fixture;
    opt.endpoint = endpoint;
    opt.model = model;
    const std::vector<std::string> responses = fetch_description(suite, opt);
    for (std::size_t i = 0; i < responses.size(); ++i) {
        std::printf("--- prompt %zu ---\n%s\n\n", i + 1, suite.prompts[i].c_str());
        std::printf("%s\n\n", responses[i].c_str());
    }
    return 0;
}

int run_pretrain_lm(const std::string& fixture, const std::string& out_path, int64_t d,
                    int64_t heads, int64_t ffn, int64_t max_len, int64_t epochs,
                    double mask_rate, uint64_t seed) {
    const TextCorpus corpus = build_corpus(load_fixture(fixture));
    SmallLMConfig cfg{d, heads, ffn, max_len};
    SmallLM lm = init_small_lm(cfg, corpus.vocab_size(), seed);
    std::printf("corpus: %lld tokens in vocabulary\n",
                static_cast<long long>(corpus.vocab_size()));
    MlmTrace trace;
    lm = mlm_pretrain(corpus, lm, mask_rate, epochs, seed, &trace);
    if (!trace.loss.empty())
        std::printf("mlm loss: first %.4f last %.4f over %zu steps\n", trace.loss.front(),
                    trace.loss.back(), trace.loss.size());
    save_checkpoint(lm.params, out_path);
    std::printf("checkpoint: %s\n", out_path.c_str());
    return 0;
}

double gradcheck_diffcore() {
    Session s;
    Expr a = leaf("a", {3, 4});
    Expr b = leaf("b", {4, 3});
    Expr c = leaf("c", {3, 3});
    Expr z = add(tanh_(matmul(a, b)), layer_norm(c));
    Expr y = mean_all(mul(softmax(z, 1), z));
    s.bind("a", xavier_uniform({3, 4}, 31, "a", DType::F64));
    s.bind("b", xavier_uniform({4, 3}, 31, "b", DType::F64));
    s.bind("c", xavier_uniform({3, 3}, 31, "c", DType::F64));
    return finite_diff_check(y, s, {"a", "b", "c"}).max_rel_err;
}

double gradcheck_vision() {
    HnfConfig cfg;
    cfg.image_hw = 16;
    cfg.channels = 1;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.ffn_hidden = 12;
    cfg.ode_steps = 2;
    cfg.cheb_k = 2;
    cfg.layers = {{8, 2}};
    ParamSet ps;
    init_hnf_params(ps, cfg, 17, DType::F64);
    Micrograph img;
    img.pixels = xavier_uniform({16, 16, 1}, 23, "img", DType::F64);
    for (int64_t i = 0; i < img.pixels.numel(); ++i)
        img.pixels.set(i, 0.5 + 0.45 * img.pixels.at(i));
    Session s;
    s.bind_all(ps);
    HnfOut out = hnf_forward(img, cfg, s);
    Expr y = mean_all(out.h_fus);
    std::vector<std::string> wanted;
    for (const auto& [name, t] : ps) wanted.push_back(name);
    return finite_diff_check(y, s, wanted, 1e-6, 4).max_rel_err;
}

double gradcheck_text() {
    Session s;
    Expr h = leaf("h", {5, 6});
    Expr u = leaf("text.u", {6});
    Expr pooled = attention_pool_expr(h, u);
    Expr score = matmul(mul(pooled, leaf("hf", {1, 6})),
                        reshape(leaf("text.v", {6}), {6, 1}));
    s.bind("h", xavier_uniform({5, 6}, 41, "h", DType::F64));
    s.bind("text.u", xavier_uniform({6}, 41, "u", DType::F64));
    s.bind("hf", xavier_uniform({1, 6}, 41, "hf", DType::F64));
    s.bind("text.v", xavier_uniform({6}, 41, "v", DType::F64));
    return finite_diff_check(mean_all(score), s, {"h", "text.u", "hf", "text.v"}).max_rel_err;
}

double gradcheck_fusion() {
    FusionConfig cfg{8, 2, 4};
    ParamSet ps;
    init_fusion_params(ps, cfg, 3, 43, "fusion.", DType::F64);
    ps["ht"] = xavier_uniform({1, 8}, 43, "ht", DType::F64);
    ps["hf"] = xavier_uniform({1, 8}, 43, "hf", DType::F64);
    Session s;
    s.bind_all(ps);
    CrossModalOut cm = cross_modal_attention_expr(leaf("ht", {1, 8}), leaf("hf", {1, 8}), cfg);
    Expr p = classify_expr(cm.y_cross, leaf("fusion.w_cls", {8, 3}));
    Expr loss = scalar_mul(-1.0, log_(pick(p, 0, 1)));
    std::vector<std::string> wanted;
    for (const auto& [name, t] : ps) wanted.push_back(name);
    return finite_diff_check(loss, s, wanted).max_rel_err;
}

int run_gradcheck(const std::string& module) {
    struct Entry {
        const char* name;
        double (*fn)();
    };
    const Entry entries[] = {{"diffcore", gradcheck_diffcore},
                             {"vision", gradcheck_vision},
                             {"text", gradcheck_text},
                             {"fusion", gradcheck_fusion}};
    bool all_ok = true;
    bool matched = false;
    for (const Entry& e : entries) {
        if (module != "all" && module != e.name) continue;
        matched = true;
        const double err = e.fn();
        const bool ok = err < 1e-4;
        all_ok = all_ok && ok;
        std::printf("%-10s max_rel_err=%.3e %s\n", e.name, err, ok ? "PASS" : "FAIL");
    }
    if (!matched) {
        std::fprintf(stderr, "unknown module '%s' (diffcore|vision|text|fusion|all)\n",
                     module.c_str());
        return 2;
    }
    return all_ok ? 0 : 1;
}

int run_report(const std::string& runs_dir, const std::string& out_dir) {
    const auto files = write_report(runs_dir, out_dir);
    for (const std::string& f : files) std::printf("wrote %s\n", f.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Micrograph classification with fused vision and text knowledge"};
    app.require_subcommand(1);

    DatasetFlags train_data;
    std::string train_config, train_fixture, train_out = "run";
    std::vector<std::string> train_sets;
    auto* train = app.add_subcommand("train", "Train with stratified k-fold cross validation");
    add_dataset_flags(*train, train_data);
    train->add_option("--config", train_config, "key = value config file");
    train->add_option("--set", train_sets, "Override a config entry, e.g. --set epochs=5");
    train->add_option("--fixture", train_fixture, "Category description fixture (jsonl)")
        ->required();
    train->add_option("--out", train_out, "Output directory for checkpoint and metrics");

    DatasetFlags eval_data;
    std::string eval_ckpt;
    auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    add_dataset_flags(*evalc, eval_data);
    evalc->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();

    std::string desc_category, desc_mode = "replay", desc_fixture, desc_endpoint, desc_model;
    auto* describe = app.add_subcommand("describe", "Fetch category descriptions");
    describe->add_option("--category", desc_category, "Category name")->required();
    describe->add_option("--mode", desc_mode, "live or replay")
        ->check(CLI::IsMember({"live", "replay"}));
    describe->add_option("--fixture", desc_fixture, "Fixture to replay from or record into");
    describe->add_option("--endpoint", desc_endpoint, "Chat completion endpoint for live mode");
    describe->add_option("--model", desc_model, "Model name for live mode");

    std::string lm_fixture, lm_out = "lm.ckpt";
    int64_t lm_d = 64, lm_heads = 4, lm_ffn = 128, lm_max_len = 128, lm_epochs = 1;
    double lm_mask = 0.15;
    uint64_t lm_seed = 1;
    auto* pretrain = app.add_subcommand("pretrain-lm", "Masked LM pretraining on a fixture");
    pretrain->add_option("--fixture", lm_fixture, "Fixture jsonl")->required();
    pretrain->add_option("--out", lm_out, "Checkpoint path");
    pretrain->add_option("--d", lm_d, "Model width");
    pretrain->add_option("--heads", lm_heads, "Attention heads");
    pretrain->add_option("--ffn", lm_ffn, "Feed-forward width");
    pretrain->add_option("--max-len", lm_max_len, "Chunk length");
    pretrain->add_option("--epochs", lm_epochs, "Training epochs");
    pretrain->add_option("--mask-rate", lm_mask, "Masking rate");
    pretrain->add_option("--seed", lm_seed, "Seed");

    std::string gc_module = "all";
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gradcheck->add_option("--module", gc_module, "diffcore|vision|text|fusion|all");

    std::string report_runs, report_out = "report";
    auto* report = app.add_subcommand("report", "Summarize metrics csv files");
    report->add_option("--runs", report_runs, "Directory with metrics*.csv")->required();
    report->add_option("--out", report_out, "Output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed())
            return run_train(train_data, train_config, train_sets, train_fixture, train_out);
        if (evalc->parsed()) return run_eval(eval_ckpt, eval_data);
        if (describe->parsed())
            return run_describe(desc_category, desc_mode, desc_fixture, desc_endpoint,
                                desc_model);
        if (pretrain->parsed())
            return run_pretrain_lm(lm_fixture, lm_out, lm_d, lm_heads, lm_ffn, lm_max_len,
                                   lm_epochs, lm_mask, lm_seed);
        if (gradcheck->parsed()) return run_gradcheck(gc_module);
        if (report->parsed()) return run_report(report_runs, report_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
