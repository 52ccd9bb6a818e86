#pragma once
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kvcar/corpus.hpp"
#include "kvcar/kvcache.hpp"
#include "kvcar/model.hpp"

namespace kvcar {

struct TrainConfig {
    double lr = 0.1;
    int64_t batch = 8;
    int64_t epochs = 1;
    double l1_scale = 1.0; // λ on the reconstruction / reuse L1 terms
    std::vector<int64_t> selected_layers;
    uint64_t seed = 0;
    int64_t window = 32; // training sequence length in bytes
    double heldout_fraction = 0.1;
    Mode ae_mode = Mode::train; // batchnorm mode inside autoencoders while training
    std::string log_path;       // append-only CSV: step,ce,l1,total,lr

    void validate() const;
};

struct TrainStats {
    int64_t steps = 0;
    double first_loss = 0.0;
    double last_loss = 0.0;
    double start_ce = 0.0; // fixed measurement set, before training
    double end_ce = 0.0;   // same set, after training
    double start_recon_l1 = 0.0; // stage-1 probe (eval mode)
    double end_recon_l1 = 0.0;   // the layer's recorded training floor
    double heldout_ppl_start = 0.0;
    double heldout_ppl_end = 0.0;
};

// Mean L1 distance between the same head of adjacent layers, per K/V slot,
// normalized by element count and averaged across minibatches. Slots exist
// for layers 1..L−1.
struct HeadStats {
    int64_t n_layers = 0;
    int64_t n_heads = 0;
    int64_t batches = 0;
    std::vector<double> distance; // [(layer−1)·2 + side]·n_heads + head

    double at(int64_t layer, KvSide side, int64_t head) const;
    double& at(int64_t layer, KvSide side, int64_t head);
    double min_distance() const;
    double max_distance() const;
};

void save_head_stats(const std::string& path, const HeadStats& stats);
HeadStats load_head_stats(const std::string& path);

// Plain next-byte pretraining with cross-entropy (the base model every
// finetuning stage starts from).
TrainStats pretrain(TransformerModel& model, const Corpus& corpus, const TrainConfig& cfg);

struct AeTrainSpec {
    int64_t latent = 0;   // stored dimension d (full-row equivalent)
    int64_t hidden = 0;   // 0 → ceil((input+latent)/2)
    float leaky_slope = 0.01f;
};

// Stage 1: train one layer's K and V autoencoders with every base parameter
// frozen. Loss per step: cross-entropy of the model output (with this
// layer's codec in the dataflow) plus λ·L1 between the raw and reconstructed
// K and V. Creates the pair in `aes` when absent. When `plan` has aliased
// heads in this layer, the autoencoders are sized for the non-aliased block.
TrainStats train_ae_stage1(TransformerModel& model, AutoencoderSet& aes, int64_t layer,
                           const AeTrainSpec& spec, const Corpus& corpus, const TrainConfig& cfg,
                           const ReusePlan* plan = nullptr);

// Stage 2: joint finetuning of the selected layers' autoencoders (base model
// frozen), loss = CE + λ·Σ per-layer reconstruction L1. Requires stage-1
// pairs for every selected layer.
TrainStats train_ae_stage2(TransformerModel& model, AutoencoderSet& aes,
                           std::span<const int64_t> layers, const Corpus& corpus,
                           const TrainConfig& cfg, const ReusePlan* plan = nullptr);

// Per-slot mean |K_n − K_{n−1}| (element-normalized) for one captured
// forward pass; slot order matches HeadStats::distance.
std::vector<double> head_l1_distances(std::span<const LayerKV> layers, int64_t n_heads);

// One epoch of K/V head capture on the base model (identity codec), then
// adjacent-layer L1 distances per head.
HeadStats collect_head_stats(const TransformerModel& model, const Corpus& corpus,
                             const TrainConfig& cfg);

// Slot (layer, head, K/V) aliases layer−1 iff its mean distance ≤ threshold.
ReusePlan build_reuse_plan(const HeadStats& stats, double threshold);

// Selects the percentile% smallest-distance slots; ties break by lower
// layer, then lower head, K before V.
ReusePlan build_reuse_plan_percentile(const HeadStats& stats, double percentile);

// Alg.-2-style finetuning with the plan fixed: forward substitutes aliased
// slots with the layer below, loss = CE + λ·L1(actual vs reused K/V), and
// every model parameter trains.
TrainStats finetune_reuse(TransformerModel& model, const ReusePlan& plan, const Corpus& corpus,
                          const TrainConfig& cfg);

// Mean held-out cross-entropy via the cacheless forward (eval-mode codecs).
double heldout_ce(const TransformerModel& model, const AutoencoderSet* aes,
                  const std::set<int64_t>* layers, const ReusePlan* plan, const Corpus& corpus,
                  const TrainConfig& cfg);

} // namespace kvcar
