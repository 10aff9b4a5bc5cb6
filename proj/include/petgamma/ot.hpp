#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "geometry.hpp"

namespace petgamma {

struct PlanEntry {
    int i;
    int j;
    double mass;
};

struct OTResult {
    double cost = 0.0;  // sum of mass * |x_i - y_j|^2
    std::vector<PlanEntry> plan;
};

// Exact transport between weighted point clouds with squared Euclidean cost
// (transportation simplex: spanning-tree basis, block pricing). Total masses
// must agree; the target is rescaled to the source total to absorb rounding.
inline OTResult exact_ot(const std::vector<Vec2>& x, std::vector<double> a, const std::vector<Vec2>& y,
                         std::vector<double> b) {
    OTResult res;
    const int n = static_cast<int>(x.size()), m = static_cast<int>(y.size());
    if (n == 0 || m == 0) return res;
    double ta = std::accumulate(a.begin(), a.end(), 0.0);
    double tb = std::accumulate(b.begin(), b.end(), 0.0);
    if (ta <= 0.0 || tb <= 0.0) return res;
    for (double& v : b) v *= ta / tb;
    auto cost = [&](int i, int j) {
        Vec2 d = x[i] - y[j];
        return dot(d, d);
    };

    // Initial basis: north-west corner on both clouds sorted along a diagonal,
    // which is the monotone 1D coupling of the projections.
    std::vector<int> oi(n), oj(m);
    std::iota(oi.begin(), oi.end(), 0);
    std::iota(oj.begin(), oj.end(), 0);
    auto key = [](Vec2 p) { return p.x + 0.618 * p.y; };
    std::sort(oi.begin(), oi.end(), [&](int p, int q) { return key(x[p]) < key(x[q]); });
    std::sort(oj.begin(), oj.end(), [&](int p, int q) { return key(y[p]) < key(y[q]); });

    struct Edge {
        int i, j;
        double f;
    };
    std::vector<Edge> edges;
    edges.reserve(n + m);
    {
        int p = 0, q = 0;
        double ra = a[oi[0]], rb = b[oj[0]];
        while (true) {
            double f = std::min(ra, rb);
            edges.push_back({oi[p], oj[q], f});
            ra -= f;
            rb -= f;
            if (p == n - 1 && q == m - 1) break;
            if ((ra <= rb && p < n - 1) || q == m - 1) {
                ++p;
                ra = a[oi[p]];
            } else {
                ++q;
                rb = b[oj[q]];
            }
        }
    }

    // Tree nodes: sources 0..n-1, sinks n..n+m-1.
    const int N = n + m;
    std::vector<std::vector<int>> adj(N);
    for (int e = 0; e < static_cast<int>(edges.size()); ++e) {
        adj[edges[e].i].push_back(e);
        adj[n + edges[e].j].push_back(e);
    }
    std::vector<int> parent(N), pedge(N), depth(N), stack;
    std::vector<double> pot(N);  // u_i for sources, v_j for sinks: c_ij = u_i + v_j on the basis
    auto rebuild = [&]() {
        std::fill(parent.begin(), parent.end(), -2);
        parent[0] = -1;
        pedge[0] = -1;
        depth[0] = 0;
        pot[0] = 0.0;
        stack.assign(1, 0);
        while (!stack.empty()) {
            int u = stack.back();
            stack.pop_back();
            for (int e : adj[u]) {
                int v = u < n ? n + edges[e].j : edges[e].i;
                if (parent[v] != -2) continue;
                parent[v] = u;
                pedge[v] = e;
                depth[v] = depth[u] + 1;
                pot[v] = cost(edges[e].i, edges[e].j) - pot[u];
                stack.push_back(v);
            }
        }
    };
    rebuild();

    const long total = static_cast<long>(n) * m;
    const long block = std::max(64L, static_cast<long>(std::sqrt(static_cast<double>(total))));
    const double tol = 1e-12 * std::max(1.0, std::sqrt(std::max(cost(oi[0], oj[0]), cost(oi[n - 1], oj[m - 1]))));
    long cursor = 0;
    std::vector<int> path_i, path_j;
    while (true) {
        // Block pricing: most negative reduced cost within the next block.
        long best = -1;
        double best_rc = -tol;
        long scanned = 0;
        while (scanned < total) {
            long end = std::min(scanned + block, total);
            for (; scanned < end; ++scanned) {
                long c = cursor;
                cursor = cursor + 1 == total ? 0 : cursor + 1;
                int i = static_cast<int>(c / m), j = static_cast<int>(c % m);
                double rc = cost(i, j) - pot[i] - pot[n + j];
                if (rc < best_rc) {
                    best_rc = rc;
                    best = c;
                }
            }
            if (best >= 0) break;
        }
        if (best < 0) break;
        int ei = static_cast<int>(best / m), ej = static_cast<int>(best % m);
        // Cycle: entering edge (ei, ej) plus the tree path from sink ej to source ei.
        int u = ei, v = n + ej;
        path_i.clear();
        path_j.clear();
        while (u != v) {
            if (depth[u] >= depth[v]) {
                path_i.push_back(pedge[u]);
                u = parent[u];
            } else {
                path_j.push_back(pedge[v]);
                v = parent[v];
            }
        }
        // Walking from ej to ei: path_j in order, then path_i reversed.
        // Edges alternate -, +, -, ... starting at ej.
        std::vector<int> cyc(path_j);
        cyc.insert(cyc.end(), path_i.rbegin(), path_i.rend());
        double theta = INFINITY;
        int leave = -1;
        for (std::size_t k = 0; k < cyc.size(); k += 2)
            if (edges[cyc[k]].f < theta) {
                theta = edges[cyc[k]].f;
                leave = cyc[k];
            }
        for (std::size_t k = 0; k < cyc.size(); ++k) edges[cyc[k]].f += (k % 2 == 0) ? -theta : theta;
        // Replace the leaving edge by the entering one.
        auto drop = [&](int node, int e) {
            auto& l = adj[node];
            l.erase(std::find(l.begin(), l.end(), e));
        };
        drop(edges[leave].i, leave);
        drop(n + edges[leave].j, leave);
        edges[leave] = {ei, ej, theta};
        adj[ei].push_back(leave);
        adj[n + ej].push_back(leave);
        rebuild();
    }
    for (const auto& e : edges)
        if (e.f > 0.0) {
            res.plan.push_back({e.i, e.j, e.f});
            res.cost += e.f * cost(e.i, e.j);
        }
    return res;
}

}  // namespace petgamma
