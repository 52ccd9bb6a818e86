#pragma once
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "kvcar/kvcache.hpp"

namespace kvcar {

// A planner scheme is either a full per-layer codec+reuse description or a
// bare kept fraction (compressed bytes / baseline bytes), matching how
// compression levels are usually quoted.
struct PlannerScheme {
    std::string name;
    double kept_fraction = 1.0;          // used when spec is absent
    std::optional<SchemeSpec> spec;      // exact accounting when present

    static PlannerScheme identity() { return {"identity", 1.0, std::nullopt}; }
    static PlannerScheme fraction(std::string name, double kept);
};

struct MemoryQuery {
    int64_t n_layers = 0;
    int64_t n_heads = 0;
    int64_t d_model = 0;
    int64_t bytes_per_element = 2; // P
    uint64_t weight_bytes = 0;
    uint64_t overhead_bytes = 0;
    uint64_t budget_bytes = 0;
    std::vector<PlannerScheme> schemes;

    void validate() const;
};

// KV bytes for one scheme at (seq_len, batch); exact schemes delegate to the
// cache accounting, fraction schemes scale the identity baseline.
uint64_t kv_bytes(const MemoryQuery& query, const PlannerScheme& scheme,
                  int64_t seq_len, int64_t batch);

// Largest sequence length that fits:
// weight_bytes + overhead_bytes + kv_bytes(seq, batch) ≤ budget_bytes.
int64_t max_seq(const MemoryQuery& query, const PlannerScheme& scheme, int64_t batch);

struct Frontier {
    struct Curve {
        std::string scheme;
        std::vector<std::pair<int64_t, int64_t>> points; // (batch, max_seq)
    };
    std::vector<Curve> curves;
};

Frontier frontier(const MemoryQuery& query, std::span<const int64_t> batches);

// CSV: header "scheme,batch,max_seq", rows ordered by scheme then batch.
void write_frontier_csv(std::ostream& out, const Frontier& frontier);

} // namespace kvcar
