#include "kvcar/planner.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "kvcar/error.hpp"

namespace kvcar {

PlannerScheme PlannerScheme::fraction(std::string name, double kept) {
    if (kept <= 0.0 || kept > 1.0) throw ConfigError("planner: kept fraction must be in (0, 1]");
    return {std::move(name), kept, std::nullopt};
}

void MemoryQuery::validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0)
        throw ConfigError("planner: model extents must be positive");
    if (d_model % n_heads != 0) throw ConfigError("planner: d_model must be divisible by n_heads");
    if (bytes_per_element != 1 && bytes_per_element != 2 && bytes_per_element != 4)
        throw ConfigError("planner: bytes per element must be 1, 2, or 4");
    if (budget_bytes < weight_bytes + overhead_bytes)
        throw ConfigError("planner: budget is below the fixed weight and overhead footprint");
    for (const auto& s : schemes)
        if (!s.spec && (s.kept_fraction <= 0.0 || s.kept_fraction > 1.0))
            throw ConfigError("planner: kept fraction must be in (0, 1]");
}

uint64_t kv_bytes(const MemoryQuery& query, const PlannerScheme& scheme,
                  int64_t seq_len, int64_t batch) {
    AccountingQuery aq;
    aq.n_layers = query.n_layers;
    aq.n_heads = query.n_heads;
    aq.d_model = query.d_model;
    aq.seq_len = seq_len;
    aq.batch = batch;
    aq.bytes_per_element = query.bytes_per_element;
    if (scheme.spec) {
        aq.scheme = *scheme.spec;
        return bytes_used(aq).total_bytes;
    }
    const uint64_t baseline = bytes_used(aq).total_bytes;
    return static_cast<uint64_t>(std::llround(static_cast<double>(baseline) * scheme.kept_fraction));
}

int64_t max_seq(const MemoryQuery& query, const PlannerScheme& scheme, int64_t batch) {
    if (batch < 1) throw ConfigError("planner: batch must be at least 1");
    const uint64_t fixed = query.weight_bytes + query.overhead_bytes;
    if (query.budget_bytes <= fixed) return 0;
    const uint64_t avail = query.budget_bytes - fixed;
    const uint64_t per_token = kv_bytes(query, scheme, 1, batch);
    if (per_token == 0) throw ConfigError("planner: scheme stores zero bytes per token");
    return static_cast<int64_t>(avail / per_token);
}

Frontier frontier(const MemoryQuery& query, std::span<const int64_t> batches) {
    query.validate();
    if (batches.empty()) throw ConfigError("planner: batch list must not be empty");
    std::vector<int64_t> sorted(batches.begin(), batches.end());
    std::sort(sorted.begin(), sorted.end());

    Frontier fr;
    for (const auto& scheme : query.schemes) {
        Frontier::Curve curve;
        curve.scheme = scheme.name;
        for (int64_t b : sorted) curve.points.emplace_back(b, max_seq(query, scheme, b));
        fr.curves.push_back(std::move(curve));
    }
    return fr;
}

void write_frontier_csv(std::ostream& out, const Frontier& frontier) {
    out << "scheme,batch,max_seq\n";
    for (const auto& curve : frontier.curves)
        for (const auto& [batch, seq] : curve.points)
            out << curve.scheme << ',' << batch << ',' << seq << '\n';
}

} // namespace kvcar
