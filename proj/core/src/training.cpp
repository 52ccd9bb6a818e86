#include "kvcar/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "kvcar/error.hpp"
#include "kvcar/log.hpp"

namespace kvcar {

using nlohmann::json;

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("train config: lr must be positive");
    if (batch <= 0) throw ConfigError("train config: batch must be positive");
    if (epochs <= 0) throw ConfigError("train config: epochs must be positive");
    if (l1_scale < 0.0) throw ConfigError("train config: l1_scale must be non-negative");
    if (window <= 0) throw ConfigError("train config: window must be positive");
    if (heldout_fraction < 0.0 || heldout_fraction >= 1.0)
        throw ConfigError("train config: heldout_fraction must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// Shared machinery
// ---------------------------------------------------------------------------

namespace {

class TrainLogger {
  public:
    explicit TrainLogger(const std::string& path) {
        if (path.empty()) return;
        const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
        out_.open(path, std::ios::app);
        if (!out_) throw IoError("train log: cannot open " + path);
        out_.precision(10);
        if (fresh) out_ << "step,ce,l1,total,lr\n";
    }
    void row(int64_t step, double ce, double l1, double total, double lr) {
        if (!out_.is_open()) return;
        out_ << step << ',' << ce << ',' << l1 << ',' << total << ',' << lr << '\n';
        out_.flush();
    }

  private:
    std::ofstream out_;
};

std::vector<int32_t> targets_of(std::span<const int32_t> tokens) {
    return std::vector<int32_t>(tokens.begin() + 1, tokens.end());
}

std::span<const int32_t> inputs_of(std::span<const int32_t> tokens) {
    return tokens.subspan(0, tokens.size() - 1);
}

// L1 over the full rows, or over the plan-selected head columns only.
enum class SlotSelect { all, non_aliased, aliased };

Tensor side_l1(const Tensor& raw, const Tensor& used, const ReusePlan* plan, int64_t layer,
               KvSide side, int64_t n_heads, SlotSelect select) {
    if (select == SlotSelect::all || plan == nullptr || plan->n_layers() == 0)
        return select == SlotSelect::aliased ? Tensor() : l1_loss(raw, used);
    const int64_t head_dim = raw.cols() / n_heads;
    std::vector<Tensor> raw_parts, used_parts;
    for (int64_t h = 0; h < n_heads; ++h) {
        const bool aliased = plan->aliased(layer, side, h);
        if ((select == SlotSelect::aliased) != aliased) continue;
        raw_parts.push_back(slice_cols(raw, h * head_dim, (h + 1) * head_dim));
        used_parts.push_back(slice_cols(used, h * head_dim, (h + 1) * head_dim));
    }
    if (raw_parts.empty()) return Tensor();
    return l1_loss(concat_cols(raw_parts), concat_cols(used_parts));
}

struct StepLoss {
    Tensor total;
    double ce = 0.0;
    double l1 = 0.0;
};

// Mean CE over a batch of windows plus λ times a caller-supplied extra term.
template <typename ExtraFn>
StepLoss batch_loss(const TransformerModel& model, const Corpus& corpus,
                    std::span<const int64_t> offsets, const TrainConfig& cfg,
                    const ForwardOptions& fwd, ExtraFn&& extra_fn) {
    Tensor ce_sum, l1_sum;
    for (int64_t off : offsets) {
        const auto tokens = corpus.window_tokens(off, cfg.window);
        ForwardResult res = model.forward_full(inputs_of(tokens), fwd);
        Tensor ce = cross_entropy(res.logits, targets_of(tokens));
        ce_sum = ce_sum.defined() ? add(ce_sum, ce) : ce;
        Tensor extra = extra_fn(res);
        if (extra.defined()) l1_sum = l1_sum.defined() ? add(l1_sum, extra) : extra;
    }
    const float inv = 1.0f / static_cast<float>(offsets.size());
    StepLoss out;
    Tensor ce_mean = mul_scalar(ce_sum, inv);
    out.ce = ce_mean.item();
    out.total = ce_mean;
    if (l1_sum.defined()) {
        Tensor l1_mean = mul_scalar(l1_sum, inv);
        out.l1 = l1_mean.item();
        out.total = add(ce_mean, mul_scalar(l1_mean, static_cast<float>(cfg.l1_scale)));
    }
    return out;
}

// Epoch loop: seeded shuffle, fixed-size minibatches (remainder dropped when
// at least one full batch exists).
template <typename StepFn>
int64_t run_epochs(const std::vector<int64_t>& train_offsets, const TrainConfig& cfg,
                   StepFn&& step_fn) {
    int64_t step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int64_t> order = train_offsets;
        std::mt19937_64 gen(cfg.seed ^ (0x9e3779b97f4a7c15ull + static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), gen);
        const int64_t n = static_cast<int64_t>(order.size());
        const int64_t bsz = std::min<int64_t>(cfg.batch, n);
        const int64_t n_batches = std::max<int64_t>(n / bsz, 1);
        for (int64_t b = 0; b < n_batches; ++b) {
            std::span<const int64_t> batch(order.data() + b * bsz, static_cast<size_t>(bsz));
            step_fn(step, batch);
            ++step;
        }
    }
    return step;
}

double mean_ce_over(const TransformerModel& model, const Corpus& corpus,
                    std::span<const int64_t> offsets, int64_t window, const ForwardOptions& fwd) {
    NoGradGuard guard;
    double total = 0.0;
    for (int64_t off : offsets) {
        const auto tokens = corpus.window_tokens(off, window);
        ForwardResult res = model.forward_full(inputs_of(tokens), fwd);
        total += cross_entropy(res.logits, targets_of(tokens)).item();
    }
    return offsets.empty() ? 0.0 : total / static_cast<double>(offsets.size());
}

// Deterministic measurement subset: leading windows of the (seeded) split.
std::span<const int64_t> probe_span(const std::vector<int64_t>& offsets, int64_t cap = 64) {
    return {offsets.data(), static_cast<size_t>(std::min<int64_t>(cap, offsets.size()))};
}

// Eval-mode reconstruction probe over K/V rows of one layer; this is the
// quantity recorded as the layer's training floor.
double recon_probe(const TransformerModel& model, const AutoencoderSet& aes, int64_t layer,
                   const Corpus& corpus, std::span<const int64_t> offsets, const TrainConfig& cfg,
                   const ReusePlan* plan) {
    NoGradGuard guard;
    std::set<int64_t> only{layer};
    ForwardOptions fwd;
    fwd.capture_kv = true;
    double total = 0.0;
    int64_t count = 0;
    const auto& pair = aes.at(layer);
    for (int64_t off : offsets) {
        const auto tokens = corpus.window_tokens(off, cfg.window);
        ForwardResult res = model.forward_full(inputs_of(tokens), fwd);
        const auto& kv = res.layer_kv[static_cast<size_t>(layer)];
        for (int s = 0; s < 2; ++s) {
            const KvSide side = static_cast<KvSide>(s);
            const Autoencoder& ae = side == KvSide::k ? pair.k : pair.v;
            Tensor raw = side == KvSide::k ? kv.k_raw : kv.v_raw;
            if (plan != nullptr && plan->n_layers() != 0 && plan->aliased_count(layer, side) > 0) {
                const int64_t head_dim = raw.cols() / plan->n_heads();
                std::vector<Tensor> parts;
                for (int64_t h = 0; h < plan->n_heads(); ++h)
                    if (!plan->aliased(layer, side, h))
                        parts.push_back(slice_cols(raw, h * head_dim, (h + 1) * head_dim));
                if (parts.empty()) continue;
                raw = concat_cols(parts);
            }
            total += ae.reconstruction_l1(raw, Mode::eval).item();
            ++count;
        }
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

void check_finite_loss(const char* stage, int64_t step, double value) {
    if (!std::isfinite(value))
        throw NumericsError(std::string(stage) + ": training diverged at step " +
                            std::to_string(step) + " (non-finite loss)");
}

} // namespace

// ---------------------------------------------------------------------------
// HeadStats
// ---------------------------------------------------------------------------

double HeadStats::at(int64_t layer, KvSide side, int64_t head) const {
    if (layer < 1 || layer >= n_layers || head < 0 || head >= n_heads)
        throw ConfigError("head stats: slot out of range");
    return distance[static_cast<size_t>(((layer - 1) * 2 + static_cast<int64_t>(side)) * n_heads + head)];
}

double& HeadStats::at(int64_t layer, KvSide side, int64_t head) {
    if (layer < 1 || layer >= n_layers || head < 0 || head >= n_heads)
        throw ConfigError("head stats: slot out of range");
    return distance[static_cast<size_t>(((layer - 1) * 2 + static_cast<int64_t>(side)) * n_heads + head)];
}

double HeadStats::min_distance() const {
    return *std::min_element(distance.begin(), distance.end());
}

double HeadStats::max_distance() const {
    return *std::max_element(distance.begin(), distance.end());
}

void save_head_stats(const std::string& path, const HeadStats& stats) {
    json j;
    j["n_layers"] = stats.n_layers;
    j["n_heads"] = stats.n_heads;
    j["batches"] = stats.batches;
    j["distance"] = stats.distance;
    std::ofstream out(path);
    if (!out) throw IoError("head stats: cannot write " + path);
    out << j.dump(2) << "\n";
}

HeadStats load_head_stats(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("head stats: cannot read " + path);
    json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw IoError("head stats: malformed JSON in " + path);
    HeadStats stats;
    stats.n_layers = j.at("n_layers").get<int64_t>();
    stats.n_heads = j.at("n_heads").get<int64_t>();
    stats.batches = j.at("batches").get<int64_t>();
    stats.distance = j.at("distance").get<std::vector<double>>();
    if (static_cast<int64_t>(stats.distance.size()) != (stats.n_layers - 1) * 2 * stats.n_heads)
        throw IoError("head stats: distance table size mismatch");
    return stats;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

TrainStats pretrain(TransformerModel& model, const Corpus& corpus, const TrainConfig& cfg) {
    cfg.validate();
    const auto split = corpus.split_windows(cfg.window, cfg.heldout_fraction, cfg.seed);
    TrainLogger logger(cfg.log_path);
    auto params = model.parameters();
    model.set_trainable(true);

    TrainStats stats;
    stats.start_ce = mean_ce_over(model, corpus, probe_span(split.train), cfg.window, {});
    stats.steps = run_epochs(split.train, cfg, [&](int64_t step, std::span<const int64_t> batch) {
        StepLoss loss = batch_loss(model, corpus, batch, cfg, {}, [](const ForwardResult&) { return Tensor(); });
        check_finite_loss("pretrain", step, loss.total.item());
        if (step == 0) stats.first_loss = loss.total.item();
        stats.last_loss = loss.total.item();
        backward(loss.total);
        sgd_step(params, cfg.lr);
        logger.row(step, loss.ce, loss.l1, loss.total.item(), cfg.lr);
    });
    stats.end_ce = mean_ce_over(model, corpus, probe_span(split.train), cfg.window, {});
    if (!split.heldout.empty())
        stats.heldout_ppl_end = std::exp(mean_ce_over(model, corpus, split.heldout, cfg.window, {}));
    KVCAR_LOG_INFO("pretrain: ", stats.steps, " steps, ce ", stats.start_ce, " -> ", stats.end_ce);
    return stats;
}

// ---------------------------------------------------------------------------
// Stage 1 / Stage 2 autoencoder finetuning
// ---------------------------------------------------------------------------

namespace {

AeTrainSpec resolve_ae_dims(const TransformerModel& model, int64_t layer, const AeTrainSpec& spec,
                            const ReusePlan* plan, KvSide side) {
    const auto& cfg = model.config();
    if (spec.latent <= 0 || spec.latent > cfg.d_model)
        throw ConfigError("stage1: latent must be in (0, d_model]");
    int64_t m = cfg.n_heads;
    if (plan != nullptr && plan->n_layers() != 0) m -= plan->aliased_count(layer, side);
    AeTrainSpec out = spec;
    if (m == 0) {
        out.latent = 0; // fully aliased side: nothing to compress
        return out;
    }
    if ((spec.latent * m) % cfg.n_heads != 0)
        throw ConfigError("stage1: latent must divide evenly across the stored heads");
    out.latent = spec.latent * m / cfg.n_heads;
    return out;
}

} // namespace

TrainStats train_ae_stage1(TransformerModel& model, AutoencoderSet& aes, int64_t layer,
                           const AeTrainSpec& spec, const Corpus& corpus, const TrainConfig& cfg,
                           const ReusePlan* plan) {
    cfg.validate();
    const auto& mcfg = model.config();
    if (layer < 0 || layer >= mcfg.n_layers) throw ConfigError("stage1: layer out of range");
    const auto split = corpus.split_windows(cfg.window, cfg.heldout_fraction, cfg.seed);

    if (!aes.has(layer)) {
        std::mt19937 gen(static_cast<uint32_t>(cfg.seed * 1000003ull + static_cast<uint64_t>(layer)));
        const int64_t head_dim = mcfg.head_dim();
        auto build = [&](KvSide side) {
            const AeTrainSpec eff = resolve_ae_dims(model, layer, spec, plan, side);
            int64_t m = mcfg.n_heads;
            if (plan != nullptr && plan->n_layers() != 0) m -= plan->aliased_count(layer, side);
            AutoencoderConfig acfg;
            acfg.input_dim = std::max<int64_t>(head_dim * m, 1);
            acfg.hidden = eff.hidden;
            acfg.latent = std::max<int64_t>(eff.latent, 1);
            acfg.leaky_slope = eff.leaky_slope;
            return Autoencoder(acfg, gen);
        };
        aes.put(layer, AutoencoderSet::Pair{build(KvSide::k), build(KvSide::v)});
    }

    // Freeze the whole base model; only this layer's autoencoder pair trains.
    model.set_trainable(false);
    auto& pair = aes.at(layer);
    pair.k.set_trainable(true);
    pair.v.set_trainable(true);
    std::vector<Tensor> params = pair.k.parameters();
    for (auto& p : pair.v.parameters()) params.push_back(p);

    std::set<int64_t> only{layer};
    ForwardOptions fwd;
    fwd.autoencoders = &aes;
    fwd.layer_filter = &only;
    fwd.ae_mode = cfg.ae_mode;
    fwd.reuse = plan;
    fwd.capture_kv = true;

    TrainLogger logger(cfg.log_path);
    TrainStats stats;
    stats.start_recon_l1 = recon_probe(model, aes, layer, corpus, probe_span(split.train, 16), cfg, plan);

    const int64_t n_heads = mcfg.n_heads;
    stats.steps = run_epochs(split.train, cfg, [&](int64_t step, std::span<const int64_t> batch) {
        StepLoss loss = batch_loss(model, corpus, batch, cfg, fwd, [&](const ForwardResult& res) {
            const auto& kv = res.layer_kv[static_cast<size_t>(layer)];
            Tensor k_term = side_l1(kv.k_raw, kv.k_used, plan, layer, KvSide::k, n_heads, SlotSelect::non_aliased);
            Tensor v_term = side_l1(kv.v_raw, kv.v_used, plan, layer, KvSide::v, n_heads, SlotSelect::non_aliased);
            if (!k_term.defined()) return v_term;
            if (!v_term.defined()) return k_term;
            return add(k_term, v_term);
        });
        check_finite_loss("stage1", step, loss.total.item());
        if (step == 0) stats.first_loss = loss.total.item();
        stats.last_loss = loss.total.item();
        backward(loss.total);
        sgd_step(params, cfg.lr);
        logger.row(step, loss.ce, loss.l1, loss.total.item(), cfg.lr);
    });

    stats.end_recon_l1 = recon_probe(model, aes, layer, corpus, probe_span(split.train, 16), cfg, plan);
    model.set_trainable(true);
    KVCAR_LOG_INFO("stage1 layer ", layer, ": recon l1 ", stats.start_recon_l1, " -> ", stats.end_recon_l1);
    return stats;
}

TrainStats train_ae_stage2(TransformerModel& model, AutoencoderSet& aes,
                           std::span<const int64_t> layers, const Corpus& corpus,
                           const TrainConfig& cfg, const ReusePlan* plan) {
    cfg.validate();
    for (int64_t layer : layers)
        if (!aes.has(layer))
            throw ConfigError("stage2: missing stage-1 autoencoders for layer " + std::to_string(layer));
    const auto split = corpus.split_windows(cfg.window, cfg.heldout_fraction, cfg.seed);
    std::set<int64_t> selected(layers.begin(), layers.end());

    ForwardOptions fwd;
    fwd.autoencoders = &aes;
    fwd.layer_filter = &selected;
    fwd.ae_mode = cfg.ae_mode;
    fwd.reuse = plan;
    fwd.capture_kv = true;

    ForwardOptions eval_fwd = fwd;
    eval_fwd.ae_mode = Mode::eval;
    eval_fwd.capture_kv = false;

    TrainStats stats;
    const auto& heldout = split.heldout.empty() ? split.train : split.heldout;
    stats.heldout_ppl_start = std::exp(mean_ce_over(model, corpus, heldout, cfg.window, eval_fwd));

    if (selected.empty()) {
        stats.heldout_ppl_end = stats.heldout_ppl_start;
        return stats;
    }

    model.set_trainable(false);
    std::vector<Tensor> params;
    for (int64_t layer : selected) {
        auto& pair = aes.at(layer);
        pair.k.set_trainable(true);
        pair.v.set_trainable(true);
        for (auto& p : pair.k.parameters()) params.push_back(p);
        for (auto& p : pair.v.parameters()) params.push_back(p);
    }

    TrainLogger logger(cfg.log_path);
    const int64_t n_heads = model.config().n_heads;
    stats.steps = run_epochs(split.train, cfg, [&](int64_t step, std::span<const int64_t> batch) {
        StepLoss loss = batch_loss(model, corpus, batch, cfg, fwd, [&](const ForwardResult& res) {
            Tensor sum;
            for (int64_t layer : selected) {
                const auto& kv = res.layer_kv[static_cast<size_t>(layer)];
                for (int s = 0; s < 2; ++s) {
                    const KvSide side = static_cast<KvSide>(s);
                    Tensor term = side_l1(side == KvSide::k ? kv.k_raw : kv.v_raw,
                                          side == KvSide::k ? kv.k_used : kv.v_used, plan, layer,
                                          side, n_heads, SlotSelect::non_aliased);
                    if (term.defined()) sum = sum.defined() ? add(sum, term) : term;
                }
            }
            return sum;
        });
        check_finite_loss("stage2", step, loss.total.item());
        if (step == 0) stats.first_loss = loss.total.item();
        stats.last_loss = loss.total.item();
        backward(loss.total);
        sgd_step(params, cfg.lr);
        logger.row(step, loss.ce, loss.l1, loss.total.item(), cfg.lr);
    });

    stats.heldout_ppl_end = std::exp(mean_ce_over(model, corpus, heldout, cfg.window, eval_fwd));
    model.set_trainable(true);
    KVCAR_LOG_INFO("stage2: heldout ppl ", stats.heldout_ppl_start, " -> ", stats.heldout_ppl_end);
    return stats;
}

// ---------------------------------------------------------------------------
// Head statistics and reuse
// ---------------------------------------------------------------------------

std::vector<double> head_l1_distances(std::span<const LayerKV> layers, int64_t n_heads) {
    if (layers.size() < 2) throw ConfigError("head distances: need at least two layers");
    const int64_t n_layers = static_cast<int64_t>(layers.size());
    const int64_t head_dim = layers[0].k_raw.cols() / n_heads;
    std::vector<double> out(static_cast<size_t>((n_layers - 1) * 2 * n_heads), 0.0);
    for (int64_t layer = 1; layer < n_layers; ++layer) {
        const auto& cur = layers[static_cast<size_t>(layer)];
        const auto& prev = layers[static_cast<size_t>(layer - 1)];
        for (int s = 0; s < 2; ++s) {
            const Tensor& a = s == 0 ? cur.k_raw : cur.v_raw;
            const Tensor& b = s == 0 ? prev.k_raw : prev.v_raw;
            if (a.shape() != b.shape()) throw ShapeError("head distances: layer shapes differ");
            const auto ad = a.data();
            const auto bd = b.data();
            const int64_t t = a.rows(), cols = a.cols();
            for (int64_t h = 0; h < n_heads; ++h) {
                double sum = 0.0;
                for (int64_t r = 0; r < t; ++r)
                    for (int64_t c = h * head_dim; c < (h + 1) * head_dim; ++c)
                        sum += std::abs(double(ad[r * cols + c]) - bd[r * cols + c]);
                out[static_cast<size_t>(((layer - 1) * 2 + s) * n_heads + h)] =
                    sum / static_cast<double>(t * head_dim);
            }
        }
    }
    return out;
}

HeadStats collect_head_stats(const TransformerModel& model, const Corpus& corpus,
                             const TrainConfig& cfg) {
    cfg.validate();
    if (corpus.size_bytes() == 0) throw ConfigError("head stats: empty corpus");
    const auto& mcfg = model.config();
    if (mcfg.n_layers < 2) throw ConfigError("head stats: need at least two layers");
    const auto split = corpus.split_windows(cfg.window, cfg.heldout_fraction, cfg.seed);

    NoGradGuard guard;
    HeadStats stats;
    stats.n_layers = mcfg.n_layers;
    stats.n_heads = mcfg.n_heads;
    stats.distance.assign(static_cast<size_t>((mcfg.n_layers - 1) * 2 * mcfg.n_heads), 0.0);

    ForwardOptions fwd;
    fwd.capture_kv = true;

    TrainConfig one_epoch = cfg;
    one_epoch.epochs = 1;
    one_epoch.log_path.clear();
    run_epochs(split.train, one_epoch, [&](int64_t, std::span<const int64_t> batch) {
        std::vector<double> batch_sum(stats.distance.size(), 0.0);
        for (int64_t off : batch) {
            const auto tokens = corpus.window_tokens(off, cfg.window);
            ForwardResult res = model.forward_full(inputs_of(tokens), fwd);
            const auto dist = head_l1_distances(res.layer_kv, mcfg.n_heads);
            for (size_t i = 0; i < dist.size(); ++i) batch_sum[i] += dist[i];
        }
        for (size_t i = 0; i < batch_sum.size(); ++i)
            stats.distance[i] += batch_sum[i] / static_cast<double>(batch.size());
        stats.batches++;
    });

    for (auto& d : stats.distance) d /= static_cast<double>(stats.batches);
    return stats;
}

ReusePlan build_reuse_plan(const HeadStats& stats, double threshold) {
    if (stats.n_layers < 2) throw ConfigError("reuse plan: stats are empty");
    ReusePlan plan(stats.n_layers, stats.n_heads);
    for (int64_t layer = 1; layer < stats.n_layers; ++layer)
        for (int s = 0; s < 2; ++s)
            for (int64_t h = 0; h < stats.n_heads; ++h)
                if (stats.at(layer, static_cast<KvSide>(s), h) <= threshold)
                    plan.set_aliased(layer, static_cast<KvSide>(s), h, true);
    return plan;
}

ReusePlan build_reuse_plan_percentile(const HeadStats& stats, double percentile) {
    if (percentile < 0.0 || percentile > 100.0)
        throw ConfigError("reuse plan: percentile must be in [0, 100]");
    if (stats.n_layers < 2) throw ConfigError("reuse plan: stats are empty");

    struct Slot {
        double dist;
        int64_t layer;
        int64_t head;
        int side; // K before V
    };
    std::vector<Slot> slots;
    for (int64_t layer = 1; layer < stats.n_layers; ++layer)
        for (int s = 0; s < 2; ++s)
            for (int64_t h = 0; h < stats.n_heads; ++h)
                slots.push_back({stats.at(layer, static_cast<KvSide>(s), h), layer, h, s});
    std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        if (a.layer != b.layer) return a.layer < b.layer;
        if (a.head != b.head) return a.head < b.head;
        return a.side < b.side;
    });

    const auto n_sel = static_cast<size_t>(
        std::llround(percentile / 100.0 * static_cast<double>(slots.size())));
    ReusePlan plan(stats.n_layers, stats.n_heads);
    for (size_t i = 0; i < std::min(n_sel, slots.size()); ++i)
        plan.set_aliased(slots[i].layer, static_cast<KvSide>(slots[i].side), slots[i].head, true);
    return plan;
}

TrainStats finetune_reuse(TransformerModel& model, const ReusePlan& plan, const Corpus& corpus,
                          const TrainConfig& cfg) {
    cfg.validate();
    const auto& mcfg = model.config();
    if (plan.n_layers() != 0 && (plan.n_layers() != mcfg.n_layers || plan.n_heads() != mcfg.n_heads))
        throw ConfigError("finetune_reuse: plan extents do not match the model");
    const auto split = corpus.split_windows(cfg.window, cfg.heldout_fraction, cfg.seed);

    ForwardOptions fwd;
    fwd.reuse = &plan;
    fwd.capture_kv = true;

    ForwardOptions eval_fwd;
    eval_fwd.reuse = &plan;

    TrainStats stats;
    stats.start_ce = mean_ce_over(model, corpus, probe_span(split.train), cfg.window, eval_fwd);

    model.set_trainable(true); // Alg.-2 updates every parameter
    auto params = model.parameters();
    TrainLogger logger(cfg.log_path);
    const int64_t n_heads = mcfg.n_heads;

    stats.steps = run_epochs(split.train, cfg, [&](int64_t step, std::span<const int64_t> batch) {
        StepLoss loss = batch_loss(model, corpus, batch, cfg, fwd, [&](const ForwardResult& res) {
            Tensor sum;
            for (int64_t layer = 1; layer < mcfg.n_layers; ++layer) {
                const auto& kv = res.layer_kv[static_cast<size_t>(layer)];
                for (int s = 0; s < 2; ++s) {
                    const KvSide side = static_cast<KvSide>(s);
                    Tensor term = side_l1(side == KvSide::k ? kv.k_raw : kv.v_raw,
                                          side == KvSide::k ? kv.k_used : kv.v_used, &plan, layer,
                                          side, n_heads, SlotSelect::aliased);
                    if (term.defined()) sum = sum.defined() ? add(sum, term) : term;
                }
            }
            return sum;
        });
        check_finite_loss("finetune_reuse", step, loss.total.item());
        if (step == 0) stats.first_loss = loss.total.item();
        stats.last_loss = loss.total.item();
        backward(loss.total);
        sgd_step(params, cfg.lr);
        logger.row(step, loss.ce, loss.l1, loss.total.item(), cfg.lr);
    });

    stats.end_ce = mean_ce_over(model, corpus, probe_span(split.train), cfg.window, eval_fwd);
    if (!split.heldout.empty())
        stats.heldout_ppl_end = std::exp(mean_ce_over(model, corpus, split.heldout, cfg.window, eval_fwd));
    KVCAR_LOG_INFO("finetune_reuse: ce ", stats.start_ce, " -> ", stats.end_ce);
    return stats;
}

double heldout_ce(const TransformerModel& model, const AutoencoderSet* aes,
                  const std::set<int64_t>* layers, const ReusePlan* plan, const Corpus& corpus,
                  const TrainConfig& cfg) {
    const auto split = corpus.split_windows(cfg.window, cfg.heldout_fraction, cfg.seed);
    ForwardOptions fwd;
    fwd.autoencoders = aes;
    fwd.layer_filter = layers;
    fwd.ae_mode = Mode::eval;
    fwd.reuse = plan;
    const auto& offsets = split.heldout.empty() ? split.train : split.heldout;
    return mean_ce_over(model, corpus, offsets, cfg.window, fwd);
}

} // namespace kvcar
