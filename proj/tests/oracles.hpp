#pragma once

// Straightforward reference implementations the optimised code is checked
// against. Kept deliberately naive.

#include "mseg/eval.hpp"
#include "mseg/tensor.hpp"
#include "mseg/rng.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

namespace oracle {

using mseg::Index;

template <typename S>
mseg::Tensor<S> random_tensor(mseg::Shape shape, mseg::Rng& rng, double lo = -1.0, double hi = 1.0)
{
    mseg::Tensor<S> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = static_cast<S>(mseg::uniform(rng, lo, hi));
    }
    return t;
}

// Six nested loops plus the kernel offsets, zero padding.
inline std::vector<double> conv3d(const mseg::Tensor<double>& in, const mseg::Tensor<double>& w,
                                  const mseg::Tensor<double>& b)
{
    const Index ci = in.extent(0), D = in.extent(1), H = in.extent(2), W = in.extent(3);
    const Index co = w.extent(0), k = w.extent(2), r = k / 2;
    std::vector<double> out(static_cast<std::size_t>(co * D * H * W));
    for (Index o = 0; o < co; ++o)
        for (Index z = 0; z < D; ++z)
            for (Index y = 0; y < H; ++y)
                for (Index x = 0; x < W; ++x) {
                    double acc = b[o];
                    for (Index c = 0; c < ci; ++c)
                        for (Index dz = 0; dz < k; ++dz)
                            for (Index dy = 0; dy < k; ++dy)
                                for (Index dx = 0; dx < k; ++dx) {
                                    const Index sz = z + dz - r, sy = y + dy - r, sx = x + dx - r;
                                    if (sz < 0 || sy < 0 || sx < 0 || sz >= D || sy >= H || sx >= W) continue;
                                    acc += w[(((o * ci + c) * k + dz) * k + dy) * k + dx]
                                         * in[((c * D + sz) * H + sy) * W + sx];
                                }
                    out[static_cast<std::size_t>(((o * D + z) * H + y) * W + x)] = acc;
                }
    return out;
}

inline double cross_entropy(const mseg::Tensor<double>& prob, const std::vector<std::uint16_t>& target)
{
    const Index n = static_cast<Index>(target.size());
    double s = 0.0;
    for (Index v = 0; v < n; ++v) {
        s += -std::log(std::max(prob[target[static_cast<std::size_t>(v)] * n + v], 1e-12));
    }
    return s / static_cast<double>(n);
}

inline std::vector<double> softmax(const mseg::Tensor<double>& z)
{
    const Index c = z.extent(0), n = z.size() / c;
    std::vector<double> p(static_cast<std::size_t>(z.size()));
    for (Index v = 0; v < n; ++v) {
        double m = -1e300;
        for (Index k = 0; k < c; ++k) m = std::max(m, z[k * n + v]);
        double s = 0.0;
        for (Index k = 0; k < c; ++k) s += std::exp(z[k * n + v] - m);
        for (Index k = 0; k < c; ++k) p[static_cast<std::size_t>(k * n + v)] = std::exp(z[k * n + v] - m) / s;
    }
    return p;
}

inline double dice(const mseg::LabelVolume& a, const mseg::LabelVolume& b, std::uint16_t id)
{
    double na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        na += a.data[i] == id;
        nb += b.data[i] == id;
        both += a.data[i] == id && b.data[i] == id;
    }
    if (na + nb == 0) return 1.0;
    return 2 * both / (na + nb);
}

// Two-pass mean / population std.
inline std::pair<double, double> mean_std(const std::vector<double>& xs)
{
    double m = 0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0;
    for (double x : xs) v += (x - m) * (x - m);
    return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

// Number of 6-connected components of voxels equal to `id`.
inline int components(const mseg::LabelVolume& l, std::uint16_t id)
{
    const auto [D, H, W] = l.dims;
    std::vector<char> seen(l.data.size(), 0);
    int count = 0;
    std::vector<Index> stack;
    for (Index s = 0; s < static_cast<Index>(l.data.size()); ++s) {
        if (l.data[static_cast<std::size_t>(s)] != id || seen[static_cast<std::size_t>(s)]) continue;
        ++count;
        stack.push_back(s);
        seen[static_cast<std::size_t>(s)] = 1;
        while (!stack.empty()) {
            const Index v = stack.back();
            stack.pop_back();
            const Index z = v / (H * W), y = (v / W) % H, x = v % W;
            const Index nz[6] = {z - 1, z + 1, z, z, z, z}, ny[6] = {y, y, y - 1, y + 1, y, y},
                        nx[6] = {x, x, x, x, x - 1, x + 1};
            for (int k = 0; k < 6; ++k) {
                if (nz[k] < 0 || ny[k] < 0 || nx[k] < 0 || nz[k] >= D || ny[k] >= H || nx[k] >= W) continue;
                const Index u = (nz[k] * H + ny[k]) * W + nx[k];
                if (l.data[static_cast<std::size_t>(u)] == id && !seen[static_cast<std::size_t>(u)]) {
                    seen[static_cast<std::size_t>(u)] = 1;
                    stack.push_back(u);
                }
            }
        }
    }
    return count;
}

} // namespace oracle
