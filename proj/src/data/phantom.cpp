#include "mseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace mseg {

namespace {

constexpr int kMaxAttempts = 1000;
constexpr double kMeanLo = 0.2;
constexpr double kMeanHi = 0.9;
constexpr double kMinSeparation = 0.05;
// Label-1 voxels required around every interior structure.
constexpr double kMargin = 1.0;
// Interior semi-axes as a fraction of the shell axes over cbrt(K-1); the
// scale shrinks by kShrink on every restart of a crowded layout.
constexpr double kAxLo = 0.45;
constexpr double kAxHi = 0.60;
constexpr double kShrink = 0.97;
// Extra clearance in the nominal layout so jittered subjects still fit.
constexpr double kTemplateSlack = 0.5;
constexpr double kShellScaleLo = 0.95;
constexpr double kShellScaleHi = 1.05;
constexpr int kStuckLimit = 50;

struct Ellipsoid {
    std::array<std::int64_t, 3> center;
    std::array<double, 3> axes;
};

template <typename F>
void for_each_voxel(const Ellipsoid& e, double grow, std::int64_t size, F&& f)
{
    std::int64_t lo[3];
    std::int64_t hi[3];
    for (int a = 0; a < 3; ++a) {
        const double r = e.axes[a] + grow;
        lo[a] = e.center[a] - static_cast<std::int64_t>(std::ceil(r));
        hi[a] = e.center[a] + static_cast<std::int64_t>(std::ceil(r));
    }
    for (std::int64_t z = lo[0]; z <= hi[0]; ++z) {
        for (std::int64_t y = lo[1]; y <= hi[1]; ++y) {
            for (std::int64_t x = lo[2]; x <= hi[2]; ++x) {
                const double dz = (z - e.center[0]) / (e.axes[0] + grow);
                const double dy = (y - e.center[1]) / (e.axes[1] + grow);
                const double dx = (x - e.center[2]) / (e.axes[2] + grow);
                if (dz * dz + dy * dy + dx * dx <= 1.0) {
                    const bool inside = z >= 0 && y >= 0 && x >= 0 && z < size && y < size && x < size;
                    if (!f(z, y, x, inside)) {
                        return;
                    }
                }
            }
        }
    }
}

// K values in [lo, hi] with pairwise gaps >= sep: uniform order statistics on
// the shrunken interval, re-spread by i*sep, then shuffled.
std::vector<double> separated_means(int k, Rng& rng)
{
    const double slack = (kMeanHi - kMeanLo) - (k - 1) * kMinSeparation;
    if (k > 0 && slack < 0.0) {
        throw std::invalid_argument("phantom: cannot draw " + std::to_string(k)
                                    + " intensity means with the required separation");
    }
    std::vector<double> u(static_cast<std::size_t>(k));
    for (auto& x : u) {
        x = uniform(rng, 0.0, slack);
    }
    std::sort(u.begin(), u.end());
    for (int i = 0; i < k; ++i) {
        u[static_cast<std::size_t>(i)] += kMeanLo + i * kMinSeparation;
    }
    std::shuffle(u.begin(), u.end(), rng);
    return u;
}

struct Template {
    Ellipsoid outer;
    std::vector<Ellipsoid> interior; // labels 2..K
    std::vector<double> means;       // labels 1..K
    LabelMap map;
};

bool fits(const Ellipsoid& e, double margin, const std::vector<std::uint16_t>& grid, std::int64_t size)
{
    bool ok = true;
    for_each_voxel(e, margin, size, [&](std::int64_t z, std::int64_t y, std::int64_t x, bool inside) {
        if (!inside || grid[static_cast<std::size_t>((z * size + y) * size + x)] != 1) {
            ok = false;
        }
        return ok;
    });
    return ok;
}

void paint(const Ellipsoid& e, std::uint16_t label, std::vector<std::uint16_t>& grid, std::int64_t size)
{
    for_each_voxel(e, 0.0, size, [&](std::int64_t z, std::int64_t y, std::int64_t x, bool inside) {
        if (inside) {
            grid[static_cast<std::size_t>((z * size + y) * size + x)] = label;
        }
        return true;
    });
}

Ellipsoid outer_ellipsoid(std::int64_t size, Rng& rng)
{
    Ellipsoid e;
    const std::int64_t c = (size - 1) / 2;
    e.center = {c, c, c};
    for (auto& a : e.axes) {
        a = std::max(1.0, size * uniform(rng, 0.40, 0.44));
    }
    return e;
}

// Places `count` interior structures inside the painted shell by rejection
// sampling. The attempt budget is shared by all of them; a run of misses
// wipes the interior and starts over within that budget.
std::vector<Ellipsoid> place_interior(const std::vector<Ellipsoid>* nominal, const Ellipsoid& outer, int count,
                                      double jitter, std::int64_t size, Rng& rng, std::vector<std::uint16_t>& grid)
{
    const std::vector<std::uint16_t> shell = grid;
    const double margin = nominal == nullptr ? kMargin + kTemplateSlack : kMargin;
    std::vector<Ellipsoid> placed;
    int attempts = 0;
    int misses = 0;
    double fill = std::pow(static_cast<double>(count), -1.0 / 3.0);
    while (static_cast<int>(placed.size()) < count) {
        if (attempts++ >= kMaxAttempts) {
            throw std::runtime_error("phantom: cannot place " + std::to_string(count + 1) + " structures in "
                                     + std::to_string(kMaxAttempts) + " rejection attempts");
        }
        if (misses >= kStuckLimit) {
            grid = shell;
            fill *= kShrink;
            placed.clear();
            misses = 0;
        }
        Ellipsoid e;
        if (nominal == nullptr) {
            // Centre uniform over the region where the candidate clears the
            // shell wall.
            std::array<double, 3> room{};
            for (int a = 0; a < 3; ++a) {
                e.axes[a] = std::max(1.0, outer.axes[a] * fill * uniform(rng, kAxLo, kAxHi));
                room[a] = outer.axes[a] - e.axes[a] - margin;
            }
            if (room[0] <= 0.0 || room[1] <= 0.0 || room[2] <= 0.0) {
                ++misses;
                continue;
            }
            std::array<double, 3> u{};
            do {
                for (auto& c : u) {
                    c = uniform(rng, -1.0, 1.0);
                }
            } while (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] > 1.0);
            for (int a = 0; a < 3; ++a) {
                e.center[a] = outer.center[a] + std::llround(u[static_cast<std::size_t>(a)] * room[a]);
            }
        } else {
            const Ellipsoid& n = (*nominal)[placed.size()];
            const double scale = uniform(rng, 0.9, 1.1);
            for (int a = 0; a < 3; ++a) {
                e.axes[a] = std::max(1.0, n.axes[a] * scale);
                e.center[a] = n.center[a] + std::llround(uniform(rng, -jitter, jitter));
            }
        }
        if (fits(e, margin, grid, size)) {
            paint(e, static_cast<std::uint16_t>(placed.size() + 2), grid, size);
            placed.push_back(e);
            misses = 0;
        } else {
            ++misses;
        }
    }
    return placed;
}

Template make_template(const PhantomSpec& spec)
{
    Template t;
    if (spec.num_structures == 0) {
        return t;
    }
    const std::int64_t size = spec.size;
    Rng rng = make_rng(spec.anatomy_seed, "phantom.anatomy");
    t.means = separated_means(spec.num_structures, rng);
    t.outer = outer_ellipsoid(size, rng);
    // Structures are laid out inside the smallest shell a subject can get.
    Ellipsoid inner = t.outer;
    for (auto& a : inner.axes) {
        a = std::max(1.0, a * kShellScaleLo - kTemplateSlack);
    }
    std::vector<std::uint16_t> grid(static_cast<std::size_t>(size * size * size), 0);
    paint(inner, 1, grid, size);
    t.interior = place_interior(nullptr, inner, spec.num_structures - 1, 0.0, size, rng, grid);

    // Partial map: a seeded subset of the interior labels, or all labels
    // when P == K.
    std::vector<std::uint16_t> pool;
    for (int l = (spec.partial_subset < spec.num_structures ? 2 : 1); l <= spec.num_structures; ++l) {
        pool.push_back(static_cast<std::uint16_t>(l));
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(static_cast<std::size_t>(spec.partial_subset));
    std::sort(pool.begin(), pool.end());
    std::vector<std::pair<std::uint16_t, std::uint16_t>> pairs;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        pairs.emplace_back(pool[i], static_cast<std::uint16_t>(i + 1));
    }
    t.map = LabelMap(std::move(pairs));
    return t;
}

} // namespace

void PhantomSpec::validate() const
{
    if (size < 8) throw std::invalid_argument("phantom: size must be >= 8");
    if (num_structures < 0) throw std::invalid_argument("phantom: structure count must be >= 0");
    if (partial_subset < 0 || partial_subset > num_structures) {
        throw std::invalid_argument("phantom: partial subset must lie in [0, K]");
    }
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("phantom: noise sigma must be >= 0");
    if (!(jitter >= 0.0)) throw std::invalid_argument("phantom: jitter must be >= 0");
}

Phantom generate_phantom(const PhantomSpec& spec)
{
    spec.validate();
    const std::int64_t size = spec.size;
    const Dims dims{size, size, size};
    Phantom p{Volume(dims), LabelVolume(dims, spec.num_structures + 1), LabelMap()};
    const Template t = make_template(spec);
    p.map = t.map;

    Rng rng = make_rng(spec.seed, "phantom.subject");
    if (spec.num_structures > 0) {
        Ellipsoid outer = t.outer;
        const double scale = uniform(rng, kShellScaleLo, kShellScaleHi);
        for (auto& a : outer.axes) {
            a = std::min(a * scale, (size - 1) / 2.0 - 1.0);
        }
        paint(outer, 1, p.labels.data, size);
        place_interior(&t.interior, outer, spec.num_structures - 1, spec.jitter * size, size, rng, p.labels.data);
    }

    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < p.image.data.size(); ++i) {
        const std::uint16_t l = p.labels.data[i];
        const double mean = l == 0 ? 0.0 : t.means[static_cast<std::size_t>(l - 1)];
        p.image.data[i] = static_cast<float>(mean + spec.noise_sigma * noise(rng));
    }
    return p;
}

} // namespace mseg
