#include "mseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace mseg {

Volume zscore_normalize(const Volume& v)
{
    v.validate();
    const auto n = static_cast<double>(v.data.size());
    double mean = 0.0;
    for (float x : v.data) {
        mean += x;
    }
    mean /= n;
    double var = 0.0;
    for (float x : v.data) {
        var += (x - mean) * (x - mean);
    }
    const double sd = std::sqrt(var / n);
    if (!(sd > 0.0)) {
        throw std::invalid_argument("zscore_normalize: volume is constant (std = 0)");
    }
    Volume out(v.dims, v.spacing);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        out.data[i] = static_cast<float>((v.data[i] - mean) / sd);
    }
    return out;
}

namespace {

void check_aligned(const Volume& image, std::span<const LabelVolume> labels)
{
    for (const auto& l : labels) {
        if (l.dims != image.dims) {
            throw std::invalid_argument("label volume dims do not match the image");
        }
    }
}

} // namespace

PatchSample sample_patch(const Volume& image, std::span<const LabelVolume> labels, std::int64_t size, Rng& rng)
{
    check_aligned(image, labels);
    if (size <= 0) {
        throw std::invalid_argument("sample_patch: size must be positive");
    }
    PatchSample s;
    for (int a = 0; a < 3; ++a) {
        if (size > image.dims[a]) {
            throw std::invalid_argument("sample_patch: patch size " + std::to_string(size)
                                        + " exceeds volume extent " + std::to_string(image.dims[a]));
        }
        std::uniform_int_distribution<std::int64_t> pick(0, image.dims[a] - size);
        s.corner[a] = pick(rng);
    }
    const Dims pd{size, size, size};
    s.image = Volume(pd, image.spacing);
    for (std::int64_t z = 0; z < size; ++z) {
        for (std::int64_t y = 0; y < size; ++y) {
            const auto src = image.index(s.corner[0] + z, s.corner[1] + y, s.corner[2]);
            std::copy_n(image.data.begin() + src, size, s.image.data.begin() + s.image.index(z, y, 0));
        }
    }
    for (const auto& l : labels) {
        LabelVolume out(pd, l.num_classes, l.spacing);
        for (std::int64_t z = 0; z < size; ++z) {
            for (std::int64_t y = 0; y < size; ++y) {
                const auto src = l.index(s.corner[0] + z, s.corner[1] + y, s.corner[2]);
                std::copy_n(l.data.begin() + src, size, out.data.begin() + out.index(z, y, 0));
            }
        }
        s.labels.push_back(std::move(out));
    }
    return s;
}

namespace {

struct ControlGrid {
    std::int64_t n[3];
    std::vector<double> disp[3];

    double sample(int comp, double gz, double gy, double gx) const
    {
        const double g[3] = {gz, gy, gx};
        std::int64_t i0[3];
        double t[3];
        for (int a = 0; a < 3; ++a) {
            i0[a] = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(g[a])), n[a] - 2);
            t[a] = g[a] - static_cast<double>(i0[a]);
        }
        double acc = 0.0;
        for (int c = 0; c < 8; ++c) {
            const int bz = c >> 2, by = (c >> 1) & 1, bx = c & 1;
            const double w = (bz ? t[0] : 1 - t[0]) * (by ? t[1] : 1 - t[1]) * (bx ? t[2] : 1 - t[2]);
            const auto idx = ((i0[0] + bz) * n[1] + i0[1] + by) * n[2] + i0[2] + bx;
            acc += w * disp[comp][static_cast<std::size_t>(idx)];
        }
        return acc;
    }
};

} // namespace

DeformedSample elastic_deform(const Volume& image, std::span<const LabelVolume> labels, double magnitude, Rng& rng)
{
    check_aligned(image, labels);
    if (!(magnitude >= 0.0)) {
        throw std::invalid_argument("elastic_deform: magnitude must be >= 0");
    }
    DeformedSample out{image, std::vector<LabelVolume>(labels.begin(), labels.end())};
    if (magnitude == 0.0) {
        return out;
    }

    ControlGrid grid;
    for (int a = 0; a < 3; ++a) {
        grid.n[a] = (image.dims[a] - 1 + kElasticControlSpacing - 1) / kElasticControlSpacing + 1;
        grid.n[a] = std::max<std::int64_t>(grid.n[a], 2);
    }
    const auto count = static_cast<std::size_t>(grid.n[0] * grid.n[1] * grid.n[2]);
    for (auto& comp : grid.disp) {
        comp.resize(count);
        for (auto& d : comp) {
            d = uniform(rng, -magnitude, magnitude);
        }
    }

    const auto D = image.dims[0], H = image.dims[1], W = image.dims[2];
    auto value = [&](std::int64_t z, std::int64_t y, std::int64_t x) -> double {
        if (z < 0 || y < 0 || x < 0 || z >= D || y >= H || x >= W) {
            return 0.0;
        }
        return image.at(z, y, x);
    };
    const double inv = 1.0 / kElasticControlSpacing;
    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const double p[3] = {z + grid.sample(0, z * inv, y * inv, x * inv),
                                     y + grid.sample(1, z * inv, y * inv, x * inv),
                                     x + grid.sample(2, z * inv, y * inv, x * inv)};
                std::int64_t f[3];
                double t[3];
                for (int a = 0; a < 3; ++a) {
                    f[a] = static_cast<std::int64_t>(std::floor(p[a]));
                    t[a] = p[a] - static_cast<double>(f[a]);
                }
                double acc = 0.0;
                for (int c = 0; c < 8; ++c) {
                    const int bz = c >> 2, by = (c >> 1) & 1, bx = c & 1;
                    const double w = (bz ? t[0] : 1 - t[0]) * (by ? t[1] : 1 - t[1]) * (bx ? t[2] : 1 - t[2]);
                    if (w != 0.0) {
                        acc += w * value(f[0] + bz, f[1] + by, f[2] + bx);
                    }
                }
                out.image.at(z, y, x) = static_cast<float>(acc);

                const std::int64_t nz = std::clamp<std::int64_t>(std::llround(p[0]), 0, D - 1);
                const std::int64_t ny = std::clamp<std::int64_t>(std::llround(p[1]), 0, H - 1);
                const std::int64_t nx = std::clamp<std::int64_t>(std::llround(p[2]), 0, W - 1);
                for (std::size_t i = 0; i < labels.size(); ++i) {
                    out.labels[i].at(z, y, x) = labels[i].at(nz, ny, nx);
                }
            }
        }
    }
    return out;
}

} // namespace mseg
