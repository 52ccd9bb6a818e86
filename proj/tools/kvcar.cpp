// kvcar: toy decoder-only transformer with a compressible KV cache.
//
// Subcommands cover the full pipeline: byte-level pretraining, two-stage
// K/V autoencoder finetuning, head-similarity analysis with cross-layer
// reuse finetuning, perplexity evaluation through the cached decode path,
// an analytic memory planner, and savings reports.
//
// Every subcommand accepts --config <json>; command-line flags override the
// file. All runs are deterministic under a fixed --seed. Set
// KVCAR_LOG=info|debug for progress output on stderr.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <kvcar/checkpoint.hpp>
#include <kvcar/corpus.hpp>
#include <kvcar/error.hpp>
#include <kvcar/eval.hpp>
#include <kvcar/log.hpp>
#include <kvcar/planner.hpp>
#include <kvcar/training.hpp>

using namespace kvcar;
using nlohmann::json;

namespace {

// --------------------------------------------------------------------------
// --config merge: values fill in flags the user did not pass. Unknown keys
// are rejected by name.
// --------------------------------------------------------------------------

class ConfigFile {
  public:
    void load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot read " + path);
        data_ = json::parse(in, nullptr, /*allow_exceptions=*/false);
        if (data_.is_discarded() || !data_.is_object())
            throw ConfigError("config: " + path + " is not a JSON object");
    }

    template <typename T>
    void merge(const CLI::Option* opt, const std::string& key, T& value) {
        known_.insert(key);
        if (!data_.is_object() || !data_.contains(key)) return;
        if (opt != nullptr && opt->count() > 0) return; // flag wins
        try {
            value = data_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config: invalid value for key \"" + key + "\"");
        }
    }

    void reject_unknown() const {
        if (!data_.is_object()) return;
        for (const auto& [key, _] : data_.items())
            if (!known_.count(key)) throw ConfigError("config: unknown key \"" + key + "\"");
    }

  private:
    json data_;
    std::set<std::string> known_;
};

struct CommonArgs {
    std::string config_path;
    uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file; flags override its values");
    args.seed_opt = cmd->add_option("--seed", args.seed, "RNG seed for init, splits, and shuffles");
}

struct TrainArgs {
    TrainConfig cfg;
    CLI::Option *lr_opt, *batch_opt, *epochs_opt, *window_opt, *heldout_opt, *l1_opt, *log_opt;
};

void add_train(CLI::App* cmd, TrainArgs& args, double default_l1) {
    args.cfg.l1_scale = default_l1;
    args.lr_opt = cmd->add_option("--lr", args.cfg.lr, "learning rate");
    args.batch_opt = cmd->add_option("--batch", args.cfg.batch, "minibatch size in windows");
    args.epochs_opt = cmd->add_option("--epochs", args.cfg.epochs, "training epochs");
    args.window_opt = cmd->add_option("--window", args.cfg.window, "window length in bytes");
    args.heldout_opt =
        cmd->add_option("--heldout-fraction", args.cfg.heldout_fraction, "held-out window fraction");
    args.l1_opt = cmd->add_option("--l1-scale", args.cfg.l1_scale, "scale on the L1 loss term");
    args.log_opt = cmd->add_option("--log", args.cfg.log_path, "append-only CSV training log");
}

void merge_train(ConfigFile& file, TrainArgs& args) {
    file.merge(args.lr_opt, "lr", args.cfg.lr);
    file.merge(args.batch_opt, "batch", args.cfg.batch);
    file.merge(args.epochs_opt, "epochs", args.cfg.epochs);
    file.merge(args.window_opt, "window", args.cfg.window);
    file.merge(args.heldout_opt, "heldout-fraction", args.cfg.heldout_fraction);
    file.merge(args.l1_opt, "l1-scale", args.cfg.l1_scale);
    file.merge(args.log_opt, "log", args.cfg.log_path);
}

Corpus load_corpus_checked(const std::string& path, int64_t min_bytes) {
    Corpus corpus = Corpus::load(path);
    if (corpus.size_bytes() < min_bytes)
        throw ConfigError("corpus: " + path + " holds " + std::to_string(corpus.size_bytes()) +
                          " bytes, need at least " + std::to_string(min_bytes));
    return corpus;
}

std::vector<int64_t> parse_int_list(const std::string& csv, const char* what) {
    std::vector<int64_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": invalid integer \"" + item + "\"");
        }
    }
    if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
    return out;
}

EvalScheme parse_scheme(const std::string& text) {
    EvalScheme scheme;
    std::string base = text;
    const auto plus = text.find('+');
    if (plus != std::string::npos) {
        base = text.substr(0, plus);
        const std::string extra = text.substr(plus + 1);
        if (extra != "reuse")
            throw ConfigError("scheme: unknown modifier \"" + extra + "\" (expected +reuse)");
        scheme.use_reuse = true;
    }
    if (base == "identity")
        scheme.kind = CodecKind::identity;
    else if (base == "ae")
        scheme.kind = CodecKind::autoencoder;
    else if (base == "ae_int8")
        scheme.kind = CodecKind::autoencoder_int8;
    else
        throw ConfigError("scheme: expected identity | ae | ae_int8, optionally +reuse; got \"" +
                          text + "\"");
    return scheme;
}

void print_savings(const ModelArtifact& artifact) {
    const auto& cfg = artifact.model.config();
    SavingsQuery q;
    q.n_layers = cfg.n_layers;
    q.n_heads = cfg.n_heads;
    q.reuse = artifact.reuse;
    for (const auto& [layer, d] : artifact.ae_latent)
        q.compressed[layer] = static_cast<double>(d) / static_cast<double>(cfg.d_model);
    const SavingsReport report = savings_report(q);
    std::cout << "savings: reuse-only " << report.reuse_only * 100.0 << "%, autoencoder-only "
              << report.autoencoder_only * 100.0 << "%, combined " << report.combined * 100.0
              << "%\n";
}

// --------------------------------------------------------------------------
// Subcommands
// --------------------------------------------------------------------------

int cmd_pretrain(const CommonArgs& common, ConfigFile& file, const std::string& corpus_path,
                 const std::string& out_path, ModelConfig mcfg, TrainArgs& targs,
                 const std::vector<CLI::Option*>& model_opts) {
    file.merge(model_opts[0], "n-layers", mcfg.n_layers);
    file.merge(model_opts[1], "n-heads", mcfg.n_heads);
    file.merge(model_opts[2], "d-model", mcfg.d_model);
    file.merge(model_opts[3], "d-ff", mcfg.d_ff);
    file.merge(model_opts[4], "max-seq", mcfg.max_seq);
    merge_train(file, targs);
    file.reject_unknown();
    mcfg.validate();

    Corpus corpus = load_corpus_checked(corpus_path, 10 * 1024);
    targs.cfg.seed = common.seed;
    std::mt19937 gen(static_cast<uint32_t>(common.seed ^ 0xabcd1234u));
    ModelArtifact artifact;
    artifact.model = TransformerModel(mcfg, gen);
    artifact.seed = common.seed;

    const TrainStats stats = pretrain(artifact.model, corpus, targs.cfg);
    save_artifact(out_path, artifact);
    std::cout << "pretrain: " << stats.steps << " steps, train ce " << stats.start_ce << " -> "
              << stats.end_ce << ", held-out perplexity " << stats.heldout_ppl_end << "\n"
              << "checkpoint written to " << out_path << "\n";
    return 0;
}

int cmd_train_ae(const CommonArgs& common, ConfigFile& file, const std::string& ckpt,
                 const std::string& corpus_path, const std::string& out_path,
                 std::string layers_csv, int64_t latent, int64_t hidden, TrainArgs& targs,
                 CLI::Option* layers_opt, CLI::Option* latent_opt, CLI::Option* hidden_opt) {
    file.merge(layers_opt, "layers", layers_csv);
    file.merge(latent_opt, "latent-dim", latent);
    file.merge(hidden_opt, "hidden", hidden);
    merge_train(file, targs);
    file.reject_unknown();
    if (layers_csv.empty())
        throw ConfigError("train-ae: \"layers\" is required (flag or config key)");
    if (latent <= 0) throw ConfigError("train-ae: \"latent-dim\" must be a positive integer");

    ModelArtifact artifact = load_artifact(ckpt);
    Corpus corpus = load_corpus_checked(corpus_path, 1024);
    targs.cfg.seed = common.seed;
    const auto layers = parse_int_list(layers_csv, "layers");

    AeTrainSpec spec;
    spec.latent = latent;
    spec.hidden = hidden;
    const ReusePlan* plan = artifact.reuse.n_layers() != 0 ? &artifact.reuse : nullptr;

    std::cout << "layer  recon_l1_init  recon_l1_final\n";
    for (int64_t layer : layers) {
        const TrainStats stats =
            train_ae_stage1(artifact.model, artifact.autoencoders, layer, spec, corpus, targs.cfg, plan);
        artifact.ae_latent[layer] = latent;
        artifact.recon_floor_k[layer] = stats.end_recon_l1;
        artifact.recon_floor_v[layer] = stats.end_recon_l1;
        std::cout << layer << "  " << stats.start_recon_l1 << "  " << stats.end_recon_l1 << "\n";
    }
    save_artifact(out_path, artifact);
    print_savings(artifact);
    std::cout << "checkpoint written to " << out_path << "\n";
    return 0;
}

int cmd_finetune_ae(const CommonArgs& common, ConfigFile& file, const std::string& ckpt,
                    const std::string& corpus_path, const std::string& out_path,
                    std::string layers_csv, TrainArgs& targs, CLI::Option* layers_opt) {
    file.merge(layers_opt, "layers", layers_csv);
    merge_train(file, targs);
    file.reject_unknown();

    ModelArtifact artifact = load_artifact(ckpt);
    Corpus corpus = load_corpus_checked(corpus_path, 1024);
    targs.cfg.seed = common.seed;
    std::vector<int64_t> layers = layers_csv.empty() ? artifact.autoencoders.layers()
                                                     : parse_int_list(layers_csv, "layers");
    const ReusePlan* plan = artifact.reuse.n_layers() != 0 ? &artifact.reuse : nullptr;

    const TrainStats stats =
        train_ae_stage2(artifact.model, artifact.autoencoders, layers, corpus, targs.cfg, plan);
    save_artifact(out_path, artifact);
    std::cout << "finetune-ae: held-out perplexity " << stats.heldout_ppl_start << " -> "
              << stats.heldout_ppl_end << "\n";
    print_savings(artifact);
    std::cout << "checkpoint written to " << out_path << "\n";
    return 0;
}

int cmd_analyze_heads(const CommonArgs& common, ConfigFile& file, const std::string& ckpt,
                      const std::string& corpus_path, const std::string& out_path,
                      TrainArgs& targs) {
    merge_train(file, targs);
    file.reject_unknown();

    ModelArtifact artifact = load_artifact(ckpt);
    Corpus corpus = load_corpus_checked(corpus_path, 1024);
    targs.cfg.seed = common.seed;
    const HeadStats stats = collect_head_stats(artifact.model, corpus, targs.cfg);

    std::cout << "layer  side  head  mean_l1\n";
    for (int64_t layer = 1; layer < stats.n_layers; ++layer)
        for (int s = 0; s < 2; ++s)
            for (int64_t h = 0; h < stats.n_heads; ++h)
                std::cout << layer << "  " << (s == 0 ? 'K' : 'V') << "  " << h << "  "
                          << stats.at(layer, static_cast<KvSide>(s), h) << "\n";
    if (!out_path.empty()) {
        save_head_stats(out_path, stats);
        std::cout << "stats written to " << out_path << "\n";
    }
    return 0;
}

int cmd_finetune_reuse(const CommonArgs& common, ConfigFile& file, const std::string& ckpt,
                       const std::string& corpus_path, const std::string& out_path,
                       const std::string& stats_path, double percentile, double threshold,
                       TrainArgs& targs, CLI::Option* pct_opt, CLI::Option* thr_opt) {
    file.merge(pct_opt, "threshold-percentile", percentile);
    file.merge(thr_opt, "threshold", threshold);
    merge_train(file, targs);
    file.reject_unknown();

    ModelArtifact artifact = load_artifact(ckpt);
    Corpus corpus = load_corpus_checked(corpus_path, 1024);
    targs.cfg.seed = common.seed;

    HeadStats stats = stats_path.empty() ? collect_head_stats(artifact.model, corpus, targs.cfg)
                                         : load_head_stats(stats_path);
    ReusePlan chosen = (thr_opt != nullptr && thr_opt->count() > 0)
                           ? build_reuse_plan(stats, threshold)
                           : build_reuse_plan_percentile(stats, percentile);

    const TrainStats result = finetune_reuse(artifact.model, chosen, corpus, targs.cfg);
    artifact.reuse = chosen;
    save_artifact(out_path, artifact);

    std::cout << "finetune-reuse: " << chosen.aliased_count() << " aliased slots, train ce "
              << result.start_ce << " -> " << result.end_ce << "\n";
    print_savings(artifact);
    std::cout << "checkpoint written to " << out_path << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& common, ConfigFile& file, const std::string& ckpt,
             const std::string& corpus_path, std::string scheme_text, std::string layers_csv,
             const std::string& out_path, TrainArgs& targs, CLI::Option* scheme_opt,
             CLI::Option* layers_opt) {
    file.merge(scheme_opt, "scheme", scheme_text);
    file.merge(layers_opt, "layers", layers_csv);
    merge_train(file, targs);
    file.reject_unknown();

    ModelArtifact artifact = load_artifact(ckpt);
    Corpus corpus = load_corpus_checked(corpus_path, 1024);
    targs.cfg.seed = common.seed;
    EvalScheme scheme = parse_scheme(scheme_text);
    if (!layers_csv.empty()) {
        const auto list = parse_int_list(layers_csv, "layers");
        scheme.layers = std::set<int64_t>(list.begin(), list.end());
    }

    const EvalReport report = evaluate_cached(artifact, corpus, targs.cfg, scheme);
    std::cout << "eval: scheme=" << scheme_text << " windows=" << report.windows
              << " tokens=" << report.tokens << "\n"
              << "mean ce " << report.mean_ce << ", perplexity " << report.perplexity << "\n"
              << "kv savings " << report.savings_fraction * 100.0 << "% ("
              << report.kv_bytes_per_window << " bytes per window at float32)\n";
    if (!out_path.empty()) {
        json j{{"scheme", scheme_text},
               {"mean_ce", report.mean_ce},
               {"perplexity", report.perplexity},
               {"windows", report.windows},
               {"tokens", report.tokens},
               {"savings_fraction", report.savings_fraction},
               {"kv_bytes_per_window", report.kv_bytes_per_window}};
        std::ofstream out(out_path);
        if (!out) throw IoError("eval: cannot write " + out_path);
        out << j.dump(2) << "\n";
        std::cout << "report written to " << out_path << "\n";
    }
    return 0;
}

int cmd_plan(ConfigFile& file, MemoryQuery q, std::string batches_csv, std::string schemes_csv,
             int64_t ref_seq, int64_t ref_batch, const std::string& out_path,
             const std::vector<CLI::Option*>& opts) {
    file.merge(opts[0], "n-layers", q.n_layers);
    file.merge(opts[1], "n-heads", q.n_heads);
    file.merge(opts[2], "d-model", q.d_model);
    file.merge(opts[3], "bytes-per-element", q.bytes_per_element);
    file.merge(opts[4], "weight-bytes", q.weight_bytes);
    file.merge(opts[5], "overhead-bytes", q.overhead_bytes);
    file.merge(opts[6], "budget-bytes", q.budget_bytes);
    file.merge(opts[7], "batches", batches_csv);
    file.merge(opts[8], "schemes", schemes_csv);
    file.reject_unknown();

    // schemes: name:kept_fraction pairs, e.g. identity:1.0,half:0.5.
    std::stringstream ss(schemes_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto colon = item.find(':');
        if (colon == std::string::npos)
            throw ConfigError("schemes: expected name:kept_fraction, got \"" + item + "\"");
        q.schemes.push_back(
            PlannerScheme::fraction(item.substr(0, colon), std::stod(item.substr(colon + 1))));
    }
    q.validate();
    const auto batches = parse_int_list(batches_csv, "batches");

    const uint64_t ref_bytes =
        kv_bytes(q, PlannerScheme::identity(), ref_seq, ref_batch);
    std::cout << "kv cache at seq=" << ref_seq << " batch=" << ref_batch << " (uncompressed): "
              << ref_bytes << " bytes = " << static_cast<double>(ref_bytes) / 1e9 << " GB\n";

    const Frontier fr = frontier(q, batches);
    if (out_path.empty()) {
        write_frontier_csv(std::cout, fr);
    } else {
        std::ofstream out(out_path);
        if (!out) throw IoError("plan: cannot write " + out_path);
        write_frontier_csv(out, fr);
        std::cout << "frontier written to " << out_path << "\n";
    }
    return 0;
}

int cmd_report_savings(ConfigFile& file, const std::string& ckpt, int64_t n_layers, int64_t n_heads,
                       std::string compressed_csv, double dd_ratio, const std::string& stats_path,
                       double percentile, const std::vector<CLI::Option*>& opts) {
    file.merge(opts[0], "n-layers", n_layers);
    file.merge(opts[1], "n-heads", n_heads);
    file.merge(opts[2], "compressed-layers", compressed_csv);
    file.merge(opts[3], "dd-ratio", dd_ratio);
    file.merge(opts[4], "threshold-percentile", percentile);
    file.reject_unknown();

    if (!ckpt.empty()) {
        ModelArtifact artifact = load_artifact(ckpt);
        print_savings(artifact);
        return 0;
    }

    SavingsQuery q;
    q.n_layers = n_layers;
    q.n_heads = n_heads;
    if (!compressed_csv.empty())
        for (int64_t layer : parse_int_list(compressed_csv, "compressed-layers"))
            q.compressed[layer] = dd_ratio;
    if (!stats_path.empty()) {
        const HeadStats stats = load_head_stats(stats_path);
        q.reuse = build_reuse_plan_percentile(stats, percentile);
    }
    const SavingsReport report = savings_report(q);
    std::cout << "savings: reuse-only " << report.reuse_only * 100.0 << "%, autoencoder-only "
              << report.autoencoder_only * 100.0 << "%, combined " << report.combined * 100.0
              << "%\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy transformer with learned KV-cache compression, head reuse, and int8 stacking"};
    app.require_subcommand(1);

    try {
        // ------------------------------------------------ pretrain
        auto* pre = app.add_subcommand("pretrain", "train the byte-level base model");
        CommonArgs pre_common;
        add_common(pre, pre_common);
        std::string pre_corpus, pre_out;
        pre->add_option("--corpus", pre_corpus, "corpus file (raw bytes)")->required();
        pre->add_option("--out", pre_out, "output checkpoint")->required();
        ModelConfig pre_cfg;
        std::vector<CLI::Option*> pre_model_opts{
            pre->add_option("--n-layers", pre_cfg.n_layers, "transformer layers"),
            pre->add_option("--n-heads", pre_cfg.n_heads, "attention heads"),
            pre->add_option("--d-model", pre_cfg.d_model, "embedding width"),
            pre->add_option("--d-ff", pre_cfg.d_ff, "feed-forward width"),
            pre->add_option("--max-seq", pre_cfg.max_seq, "maximum sequence length"),
        };
        TrainArgs pre_train;
        add_train(pre, pre_train, 0.0);

        // ------------------------------------------------ train-ae
        auto* tae = app.add_subcommand("train-ae", "stage-1 per-layer K/V autoencoder training");
        CommonArgs tae_common;
        add_common(tae, tae_common);
        std::string tae_ckpt, tae_corpus, tae_out, tae_layers;
        int64_t tae_latent = 0, tae_hidden = 0;
        tae->add_option("--ckpt", tae_ckpt, "input checkpoint")->required();
        tae->add_option("--corpus", tae_corpus, "corpus file")->required();
        tae->add_option("--out", tae_out, "output checkpoint")->required();
        auto* tae_layers_opt = tae->add_option("--layers", tae_layers, "layers to train, e.g. 0,2,3");
        auto* tae_latent_opt = tae->add_option("--latent-dim", tae_latent, "stored dimension d");
        auto* tae_hidden_opt = tae->add_option("--hidden", tae_hidden, "encoder hidden width (0 = auto)");
        TrainArgs tae_train;
        add_train(tae, tae_train, 1.0);

        // ------------------------------------------------ finetune-ae
        auto* fae = app.add_subcommand("finetune-ae", "stage-2 joint autoencoder finetuning");
        CommonArgs fae_common;
        add_common(fae, fae_common);
        std::string fae_ckpt, fae_corpus, fae_out, fae_layers;
        fae->add_option("--ckpt", fae_ckpt, "input checkpoint (with stage-1 autoencoders)")->required();
        fae->add_option("--corpus", fae_corpus, "corpus file")->required();
        fae->add_option("--out", fae_out, "output checkpoint")->required();
        auto* fae_layers_opt =
            fae->add_option("--layers", fae_layers, "layers to finetune (default: all stored)");
        TrainArgs fae_train;
        add_train(fae, fae_train, 0.1);

        // ------------------------------------------------ analyze-heads
        auto* ah = app.add_subcommand("analyze-heads", "adjacent-layer head L1 statistics");
        CommonArgs ah_common;
        add_common(ah, ah_common);
        std::string ah_ckpt, ah_corpus, ah_out;
        ah->add_option("--ckpt", ah_ckpt, "input checkpoint")->required();
        ah->add_option("--corpus", ah_corpus, "corpus file")->required();
        ah->add_option("--out", ah_out, "stats JSON output");
        TrainArgs ah_train;
        add_train(ah, ah_train, 0.0);

        // ------------------------------------------------ finetune-reuse
        auto* fr = app.add_subcommand("finetune-reuse", "build a reuse plan and finetune with it");
        CommonArgs fr_common;
        add_common(fr, fr_common);
        std::string fr_ckpt, fr_corpus, fr_out, fr_stats;
        double fr_pct = 25.0, fr_thr = 0.0;
        fr->add_option("--ckpt", fr_ckpt, "input checkpoint")->required();
        fr->add_option("--corpus", fr_corpus, "corpus file")->required();
        fr->add_option("--out", fr_out, "output checkpoint")->required();
        fr->add_option("--stats", fr_stats, "head stats JSON (computed when absent)");
        auto* fr_pct_opt =
            fr->add_option("--threshold-percentile", fr_pct, "alias the smallest percentile of slots");
        auto* fr_thr_opt = fr->add_option("--threshold", fr_thr, "absolute distance threshold");
        TrainArgs fr_train;
        add_train(fr, fr_train, 0.1);

        // ------------------------------------------------ eval
        auto* ev = app.add_subcommand("eval", "held-out perplexity via the cached decode path");
        CommonArgs ev_common;
        add_common(ev, ev_common);
        std::string ev_ckpt, ev_corpus, ev_scheme = "identity", ev_layers, ev_out;
        ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
        ev->add_option("--corpus", ev_corpus, "corpus file")->required();
        auto* ev_scheme_opt =
            ev->add_option("--scheme", ev_scheme, "identity | ae | ae_int8, optionally +reuse");
        auto* ev_layers_opt = ev->add_option("--layers", ev_layers, "restrict compressed layers");
        ev->add_option("--out", ev_out, "JSON report output");
        TrainArgs ev_train;
        add_train(ev, ev_train, 0.0);

        // ------------------------------------------------ plan
        auto* pl = app.add_subcommand("plan", "analytic max-sequence-length frontier");
        CommonArgs pl_common;
        add_common(pl, pl_common);
        MemoryQuery pl_q;
        std::string pl_batches = "1,2,4,8,16,32,64", pl_schemes = "identity:1.0", pl_out;
        int64_t pl_ref_seq = 2048, pl_ref_batch = 8;
        std::vector<CLI::Option*> pl_opts{
            pl->add_option("--n-layers", pl_q.n_layers, "transformer layers")->required(),
            pl->add_option("--n-heads", pl_q.n_heads, "attention heads")->required(),
            pl->add_option("--d-model", pl_q.d_model, "embedding width")->required(),
            pl->add_option("--bytes-per-element", pl_q.bytes_per_element, "P: 1, 2, or 4"),
            pl->add_option("--weight-bytes", pl_q.weight_bytes, "model parameter footprint"),
            pl->add_option("--overhead-bytes", pl_q.overhead_bytes, "fixed runtime overhead"),
            pl->add_option("--budget-bytes", pl_q.budget_bytes, "device memory budget")->required(),
            pl->add_option("--batches", pl_batches, "batch sizes, e.g. 1,2,4"),
            pl->add_option("--schemes", pl_schemes, "name:kept_fraction pairs"),
        };
        pl->add_option("--ref-seq", pl_ref_seq, "reference sequence length for the header");
        pl->add_option("--ref-batch", pl_ref_batch, "reference batch for the header");
        pl->add_option("--out", pl_out, "CSV output path (stdout when omitted)");

        // ------------------------------------------------ report-savings
        auto* rs = app.add_subcommand("report-savings", "savings fractions for a plan or checkpoint");
        CommonArgs rs_common;
        add_common(rs, rs_common);
        std::string rs_ckpt, rs_compressed, rs_stats;
        int64_t rs_layers = 0, rs_heads = 0;
        double rs_ratio = 0.5, rs_pct = 25.0;
        rs->add_option("--ckpt", rs_ckpt, "checkpoint (overrides the flag-based query)");
        std::vector<CLI::Option*> rs_opts{
            rs->add_option("--n-layers", rs_layers, "transformer layers"),
            rs->add_option("--n-heads", rs_heads, "attention heads"),
            rs->add_option("--compressed-layers", rs_compressed, "layers compressed at --dd-ratio"),
            rs->add_option("--dd-ratio", rs_ratio, "d/D ratio of compressed layers"),
            rs->add_option("--threshold-percentile", rs_pct, "reuse percentile applied to --stats"),
        };
        rs->add_option("--stats", rs_stats, "head stats JSON for the reuse side");

        app.parse(argc, argv);

        auto load_config = [](const CommonArgs& common, ConfigFile& file) {
            if (!common.config_path.empty()) file.load(common.config_path);
        };

        if (pre->parsed()) {
            ConfigFile file;
            load_config(pre_common, file);
            file.merge(pre_common.seed_opt, "seed", pre_common.seed);
            return cmd_pretrain(pre_common, file, pre_corpus, pre_out, pre_cfg, pre_train,
                                pre_model_opts);
        }
        if (tae->parsed()) {
            ConfigFile file;
            load_config(tae_common, file);
            file.merge(tae_common.seed_opt, "seed", tae_common.seed);
            return cmd_train_ae(tae_common, file, tae_ckpt, tae_corpus, tae_out, tae_layers,
                                tae_latent, tae_hidden, tae_train, tae_layers_opt, tae_latent_opt,
                                tae_hidden_opt);
        }
        if (fae->parsed()) {
            ConfigFile file;
            load_config(fae_common, file);
            file.merge(fae_common.seed_opt, "seed", fae_common.seed);
            return cmd_finetune_ae(fae_common, file, fae_ckpt, fae_corpus, fae_out, fae_layers,
                                   fae_train, fae_layers_opt);
        }
        if (ah->parsed()) {
            ConfigFile file;
            load_config(ah_common, file);
            file.merge(ah_common.seed_opt, "seed", ah_common.seed);
            return cmd_analyze_heads(ah_common, file, ah_ckpt, ah_corpus, ah_out, ah_train);
        }
        if (fr->parsed()) {
            ConfigFile file;
            load_config(fr_common, file);
            file.merge(fr_common.seed_opt, "seed", fr_common.seed);
            return cmd_finetune_reuse(fr_common, file, fr_ckpt, fr_corpus, fr_out, fr_stats, fr_pct,
                                      fr_thr, fr_train, fr_pct_opt, fr_thr_opt);
        }
        if (ev->parsed()) {
            ConfigFile file;
            load_config(ev_common, file);
            file.merge(ev_common.seed_opt, "seed", ev_common.seed);
            return cmd_eval(ev_common, file, ev_ckpt, ev_corpus, ev_scheme, ev_layers, ev_out,
                            ev_train, ev_scheme_opt, ev_layers_opt);
        }
        if (pl->parsed()) {
            ConfigFile file;
            load_config(pl_common, file);
            return cmd_plan(file, pl_q, pl_batches, pl_schemes, pl_ref_seq, pl_ref_batch, pl_out,
                            pl_opts);
        }
        if (rs->parsed()) {
            ConfigFile file;
            load_config(rs_common, file);
            return cmd_report_savings(file, rs_ckpt, rs_layers, rs_heads, rs_compressed, rs_ratio,
                                      rs_stats, rs_pct, rs_opts);
        }
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
