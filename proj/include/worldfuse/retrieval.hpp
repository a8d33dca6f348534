// Prototype-based retrieval: object-wise state embeddings (deterministic
// feature hashing of sub-state token multisets), greedy k-center prototypes
// with exact covering radius, exact 1-Wasserstein distance between uniform
// discrete point sets (transportation problem via successive shortest paths),
// Top-K model ranking, and the prototype-distance bound as an executable check.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"
#include "sim.hpp"

namespace worldfuse {

inline constexpr int kEmbedDim = 32;

using Vec = std::vector<double>;

struct EmbeddingSet {
    std::vector<Vec> vectors;  // unit norm, multiset semantics
    std::string source;        // dataset id or "live-state"
};

struct PrototypeSet {
    std::vector<Vec> centers;  // drawn from the source set
    std::vector<int> center_indices;
    double rho = 0.0;  // exact covering radius for these centers
};

inline double squared_dist(const Vec& a, const Vec& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

inline double dist(const Vec& a, const Vec& b) { return std::sqrt(squared_dist(a, b)); }

// ---------------------------------------------------------------------------
// Object-wise embedding
// ---------------------------------------------------------------------------

// Grouping rule: an object is any non-character entity that carries a
// location or flag triple; its sub-state is every triple mentioning it.
inline std::vector<std::pair<std::string, std::vector<std::string>>> object_substates(
    const State& st) {
    std::vector<std::string> objects;
    for (const auto& t : st.triples) {
        if (t.s == "character" && t.r == "hold" && t.o != "none") objects.push_back(t.o);
        if (t.s != "character" && (t.r == "inside" || t.r == "on" || t.r == "is"))
            objects.push_back(t.s);
    }
    std::sort(objects.begin(), objects.end());
    objects.erase(std::unique(objects.begin(), objects.end()), objects.end());

    std::vector<std::pair<std::string, std::vector<std::string>>> out;
    for (const auto& obj : objects) {
        std::vector<std::string> tokens;
        for (const auto& t : st.triples) {
            if (t.s != obj && t.o != obj) continue;
            tokens.push_back(t.s);
            tokens.push_back(t.r);
            tokens.push_back(t.o);
        }
        out.emplace_back(obj, std::move(tokens));
    }
    return out;
}

// Feature hashing of a token multiset into kEmbedDim dims, L2-normalized.
inline Vec embed_tokens(const std::vector<std::string>& tokens) {
    Vec v(kEmbedDim, 0.0);
    for (const auto& tok : tokens) {
        uint64_t h = fnv1a64(tok);
        int idx = static_cast<int>(h % kEmbedDim);
        double sign = ((h >> 32) & 1) ? 1.0 : -1.0;
        v[static_cast<size_t>(idx)] += sign;
    }
    double norm = std::sqrt(squared_dist(v, Vec(kEmbedDim, 0.0)));
    if (norm < 1e-12) {
        v.assign(kEmbedDim, 0.0);
        v[0] = 1.0;
        return v;
    }
    for (auto& x : v) x /= norm;
    return v;
}

inline EmbeddingSet embed_objects(const State& st, const std::string& source = "live-state") {
    auto subs = object_substates(st);
    if (subs.empty()) throw argument_error("embed_objects: state contains no objects");
    EmbeddingSet out;
    out.source = source;
    for (const auto& [obj, tokens] : subs) out.vectors.push_back(embed_tokens(tokens));
    return out;
}

inline EmbeddingSet embed_dataset(const std::vector<Trajectory>& trajs,
                                  const std::string& source) {
    EmbeddingSet out;
    out.source = source;
    for (const auto& traj : trajs) {
        for (size_t i = 0; i < traj.steps.size(); ++i) {
            EmbeddingSet s = embed_objects(traj.steps[i].before, source);
            out.vectors.insert(out.vectors.end(), s.vectors.begin(), s.vectors.end());
            if (i + 1 == traj.steps.size()) {
                EmbeddingSet f = embed_objects(traj.steps[i].after, source);
                out.vectors.insert(out.vectors.end(), f.vectors.begin(), f.vectors.end());
            }
        }
    }
    if (out.vectors.empty()) throw argument_error("embed_dataset: no states");
    return out;
}

// ---------------------------------------------------------------------------
// k-center (greedy farthest-point, 2-approximation)
// ---------------------------------------------------------------------------

inline PrototypeSet k_center(const std::vector<Vec>& points, int k) {
    int n = static_cast<int>(points.size());
    if (k < 1 || k > n) throw argument_error("k_center: k out of range [1," + std::to_string(n) + "]");

    PrototypeSet out;
    size_t d = points[0].size();
    Vec mean(d, 0.0);
    for (const auto& p : points)
        for (size_t i = 0; i < d; ++i) mean[i] += p[i];
    for (auto& x : mean) x /= n;

    // first center: farthest from the mean, ties by lowest index
    int first = 0;
    double best = -1.0;
    for (int i = 0; i < n; ++i) {
        double dd = squared_dist(points[static_cast<size_t>(i)], mean);
        if (dd > best + 1e-15) {
            best = dd;
            first = i;
        }
    }
    std::vector<double> min_d2(static_cast<size_t>(n));
    out.center_indices.push_back(first);
    out.centers.push_back(points[static_cast<size_t>(first)]);
    for (int i = 0; i < n; ++i)
        min_d2[static_cast<size_t>(i)] = squared_dist(points[static_cast<size_t>(i)],
                                                      points[static_cast<size_t>(first)]);

    while (static_cast<int>(out.centers.size()) < k) {
        int far = 0;
        double far_d2 = -1.0;
        for (int i = 0; i < n; ++i)
            if (min_d2[static_cast<size_t>(i)] > far_d2 + 1e-15) {
                far_d2 = min_d2[static_cast<size_t>(i)];
                far = i;
            }
        out.center_indices.push_back(far);
        out.centers.push_back(points[static_cast<size_t>(far)]);
        for (int i = 0; i < n; ++i)
            min_d2[static_cast<size_t>(i)] =
                std::min(min_d2[static_cast<size_t>(i)],
                         squared_dist(points[static_cast<size_t>(i)], points[static_cast<size_t>(far)]));
    }
    double worst = 0.0;
    for (int i = 0; i < n; ++i) worst = std::max(worst, min_d2[static_cast<size_t>(i)]);
    out.rho = std::sqrt(worst);
    return out;
}

inline PrototypeSet k_center(const EmbeddingSet& set, int k) { return k_center(set.vectors, k); }

// ---------------------------------------------------------------------------
// Exact 1-Wasserstein between uniform discrete distributions. Duplicate points
// collapse to weighted sites; masses scale to integers by lcm(|a|,|b|). Solved
// as a transportation problem with successive shortest paths (Dijkstra with
// potentials; all ground costs are nonnegative).
// ---------------------------------------------------------------------------

namespace emd_detail {

struct Site {
    Vec point;
    int64_t mass;
};

inline std::vector<Site> collapse(const std::vector<Vec>& pts) {
    std::map<Vec, int64_t> uniq;
    for (const auto& p : pts) uniq[p] += 1;
    std::vector<Site> out;
    out.reserve(uniq.size());
    for (auto& [p, m] : uniq) out.push_back({p, m});
    return out;
}

}  // namespace emd_detail

inline double wasserstein(const std::vector<Vec>& a, const std::vector<Vec>& b) {
    if (a.empty() || b.empty()) throw argument_error("wasserstein: empty point set");
    int64_t na = static_cast<int64_t>(a.size()), nb = static_cast<int64_t>(b.size());
    int64_t g = std::gcd(na, nb);
    int64_t lcm = na / g * nb;

    std::vector<emd_detail::Site> src = emd_detail::collapse(a);
    std::vector<emd_detail::Site> snk = emd_detail::collapse(b);
    int u = static_cast<int>(src.size()), v = static_cast<int>(snk.size());
    std::vector<int64_t> supply(static_cast<size_t>(u)), demand(static_cast<size_t>(v));
    for (int i = 0; i < u; ++i) supply[static_cast<size_t>(i)] = src[static_cast<size_t>(i)].mass * (lcm / na);
    for (int j = 0; j < v; ++j) demand[static_cast<size_t>(j)] = snk[static_cast<size_t>(j)].mass * (lcm / nb);

    std::vector<std::vector<double>> cost(static_cast<size_t>(u), std::vector<double>(static_cast<size_t>(v)));
    for (int i = 0; i < u; ++i)
        for (int j = 0; j < v; ++j)
            cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                dist(src[static_cast<size_t>(i)].point, snk[static_cast<size_t>(j)].point);

    std::vector<std::vector<int64_t>> flow(static_cast<size_t>(u), std::vector<int64_t>(static_cast<size_t>(v), 0));
    const int n_nodes = u + v;  // sources [0,u), sinks [u, u+v)
    std::vector<double> pot(static_cast<size_t>(n_nodes), 0.0);

    const double inf = std::numeric_limits<double>::infinity();
    int64_t remaining = lcm;
    while (remaining > 0) {
        // Dijkstra with reduced costs w + pot[x] - pot[y] over the residual
        // graph: forward edges i->j always present, backward j->i iff flow>0.
        std::vector<double> d(static_cast<size_t>(n_nodes), inf);
        std::vector<int> prev(static_cast<size_t>(n_nodes), -1);
        std::vector<char> done(static_cast<size_t>(n_nodes), 0);
        for (int i = 0; i < u; ++i)
            if (supply[static_cast<size_t>(i)] > 0) d[static_cast<size_t>(i)] = 0.0;
        while (true) {
            int cur = -1;
            double best = inf;
            for (int x = 0; x < n_nodes; ++x)
                if (!done[static_cast<size_t>(x)] && d[static_cast<size_t>(x)] < best) {
                    best = d[static_cast<size_t>(x)];
                    cur = x;
                }
            if (cur < 0) break;
            done[static_cast<size_t>(cur)] = 1;
            if (cur < u) {
                int i = cur;
                for (int j = 0; j < v; ++j) {
                    double rc = cost[static_cast<size_t>(i)][static_cast<size_t>(j)] +
                                pot[static_cast<size_t>(i)] - pot[static_cast<size_t>(u + j)];
                    if (rc < 0) rc = 0;  // floating round-off guard
                    double nd = d[static_cast<size_t>(i)] + rc;
                    if (nd < d[static_cast<size_t>(u + j)]) {
                        d[static_cast<size_t>(u + j)] = nd;
                        prev[static_cast<size_t>(u + j)] = i;
                    }
                }
            } else {
                int j = cur - u;
                for (int i = 0; i < u; ++i) {
                    if (flow[static_cast<size_t>(i)][static_cast<size_t>(j)] <= 0) continue;
                    double rc = -cost[static_cast<size_t>(i)][static_cast<size_t>(j)] +
                                pot[static_cast<size_t>(cur)] - pot[static_cast<size_t>(i)];
                    if (rc < 0) rc = 0;
                    double nd = d[static_cast<size_t>(cur)] + rc;
                    if (nd < d[static_cast<size_t>(i)]) {
                        d[static_cast<size_t>(i)] = nd;
                        prev[static_cast<size_t>(i)] = cur;
                    }
                }
            }
        }
        // cheapest reachable sink with remaining demand
        int best_j = -1;
        double best_d = inf;
        for (int j = 0; j < v; ++j)
            if (demand[static_cast<size_t>(j)] > 0 && d[static_cast<size_t>(u + j)] < best_d) {
                best_d = d[static_cast<size_t>(u + j)];
                best_j = j;
            }
        if (best_j < 0) throw contract_error("wasserstein: disconnected transportation problem");

        // Path back from the sink: sinks were relaxed from sources (forward
        // edges), sources from sinks (backward edges) or are the start.
        int64_t bottleneck = demand[static_cast<size_t>(best_j)];
        for (int node = u + best_j;;) {
            int p = prev[static_cast<size_t>(node)];
            if (node >= u) {
                node = p;
            } else {
                if (p < 0) {
                    bottleneck = std::min(bottleneck, supply[static_cast<size_t>(node)]);
                    break;
                }
                bottleneck = std::min(bottleneck,
                                      flow[static_cast<size_t>(node)][static_cast<size_t>(p - u)]);
                node = p;
            }
        }
        for (int node = u + best_j;;) {
            int p = prev[static_cast<size_t>(node)];
            if (node >= u) {
                flow[static_cast<size_t>(p)][static_cast<size_t>(node - u)] += bottleneck;
                node = p;
            } else {
                if (p < 0) {
                    supply[static_cast<size_t>(node)] -= bottleneck;
                    break;
                }
                flow[static_cast<size_t>(node)][static_cast<size_t>(p - u)] -= bottleneck;
                node = p;
            }
        }
        demand[static_cast<size_t>(best_j)] -= bottleneck;
        remaining -= bottleneck;

        for (int x = 0; x < n_nodes; ++x)
            if (d[static_cast<size_t>(x)] < inf) pot[static_cast<size_t>(x)] += d[static_cast<size_t>(x)];
    }

    double total = 0.0;
    for (int i = 0; i < u; ++i)
        for (int j = 0; j < v; ++j)
            total += static_cast<double>(flow[static_cast<size_t>(i)][static_cast<size_t>(j)]) *
                     cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
    return total / static_cast<double>(lcm);
}

inline double wasserstein(const EmbeddingSet& a, const EmbeddingSet& b) {
    return wasserstein(a.vectors, b.vectors);
}

// ---------------------------------------------------------------------------
// Retrieval and the prototype bound
// ---------------------------------------------------------------------------

struct RankedModel {
    std::string id;
    double distance;
    int rank;  // 1-based
};

struct RetrievalEntry {
    std::string id;
    const PrototypeSet* prototypes;
};

// Ranks every entry by prototype distance to the live set (ascending, ties by
// id). Live prototypes use the same k, clamped to the live set size.
inline std::vector<RankedModel> rank_models(const std::vector<RetrievalEntry>& entries,
                                            const EmbeddingSet& live, int k_prototypes) {
    if (entries.empty()) throw argument_error("rank_models: no models");
    for (const auto& e : entries)
        if (!e.prototypes || e.prototypes->centers.empty())
            throw config_error("model " + e.id + " is missing prototypes");
    int k_live = std::min<int>(k_prototypes, static_cast<int>(live.vectors.size()));
    PrototypeSet p_live = k_center(live.vectors, k_live);
    std::vector<RankedModel> out;
    for (const auto& e : entries)
        out.push_back({e.id, wasserstein(e.prototypes->centers, p_live.centers), 0});
    std::sort(out.begin(), out.end(), [](const RankedModel& a, const RankedModel& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        return a.id < b.id;
    });
    for (size_t i = 0; i < out.size(); ++i) out[i].rank = static_cast<int>(i) + 1;
    return out;
}

inline std::vector<RankedModel> retrieve_top_k(const std::vector<RetrievalEntry>& entries,
                                               const EmbeddingSet& live, int top_k,
                                               int k_prototypes) {
    if (top_k < 1 || top_k > static_cast<int>(entries.size()))
        throw argument_error("retrieve_top_k: K out of range");
    std::vector<RankedModel> ranked = rank_models(entries, live, k_prototypes);
    ranked.resize(static_cast<size_t>(top_k));
    return ranked;
}

struct BoundednessCheck {
    double lhs;    // delta(p_i, p_j)
    double rhs;    // delta(E_i, E_j) + 2 * max(rho_i, rho_j)
    double rho_i;
    double rho_j;
};

inline BoundednessCheck check_boundedness(const std::vector<Vec>& e_i,
                                          const std::vector<Vec>& e_j, int k) {
    PrototypeSet pi = k_center(e_i, std::min<int>(k, static_cast<int>(e_i.size())));
    PrototypeSet pj = k_center(e_j, std::min<int>(k, static_cast<int>(e_j.size())));
    BoundednessCheck out;
    out.rho_i = pi.rho;
    out.rho_j = pj.rho;
    out.lhs = wasserstein(pi.centers, pj.centers);
    out.rhs = wasserstein(e_i, e_j) + 2.0 * std::max(pi.rho, pj.rho);
    return out;
}

}  // namespace worldfuse
