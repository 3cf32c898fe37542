#include "mseg/autograd.hpp"
#include "mseg/parallel.hpp"

#include "op_support.hpp"

#include <algorithm>
#include <vector>

namespace mseg {

namespace {

// Columns are produced a few z-slices at a time so the unrolled patch matrix
// stays cache-sized. Chunk boundaries depend only on the geometry, never on
// the worker count.
constexpr Index kTargetChunkColumns = 4096;

struct ConvGeometry {
    Index cin, cout, d, h, w, k, pad;

    Index plane() const { return h * w; }
    Index voxels() const { return d * h * w; }
    Index rows() const { return cin * k * k * k; }
    Index slices_per_chunk() const { return std::max<Index>(1, kTargetChunkColumns / plane()); }
    Index chunks() const { return (d + slices_per_chunk() - 1) / slices_per_chunk(); }
};

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using StridedMap = Eigen::Map<RowMat<Scalar>, 0, Eigen::OuterStride<>>;

template <typename Scalar>
using ConstStridedMap = Eigen::Map<const RowMat<Scalar>, 0, Eigen::OuterStride<>>;

// Unrolls slices [z0, z1) into a rows() x n row-major matrix.
template <typename Scalar>
void im2col(const Scalar* in, const ConvGeometry& g, Index z0, Index z1, Scalar* col)
{
    const Index n = (z1 - z0) * g.plane();
    Index r = 0;
    for (Index ci = 0; ci < g.cin; ++ci) {
        for (Index kd = 0; kd < g.k; ++kd) {
            for (Index kh = 0; kh < g.k; ++kh) {
                for (Index kw = 0; kw < g.k; ++kw, ++r) {
                    Scalar* row = col + r * n;
                    const Index x_lo = std::max<Index>(0, g.pad - kw);
                    const Index x_hi = std::min<Index>(g.w, g.w + g.pad - kw);
                    for (Index z = z0; z < z1; ++z) {
                        const Index iz = z + kd - g.pad;
                        for (Index y = 0; y < g.h; ++y) {
                            Scalar* dst = row + ((z - z0) * g.h + y) * g.w;
                            const Index iy = y + kh - g.pad;
                            if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h || x_lo >= x_hi) {
                                std::fill(dst, dst + g.w, Scalar(0));
                                continue;
                            }
                            const Scalar* src = in + ((ci * g.d + iz) * g.h + iy) * g.w + (kw - g.pad);
                            std::fill(dst, dst + x_lo, Scalar(0));
                            std::copy(src + x_lo, src + x_hi, dst + x_lo);
                            std::fill(dst + x_hi, dst + g.w, Scalar(0));
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds the column matrix back into dx.
template <typename Scalar>
void col2im(const Scalar* col, const ConvGeometry& g, Index z0, Index z1, Scalar* dx)
{
    const Index n = (z1 - z0) * g.plane();
    Index r = 0;
    for (Index ci = 0; ci < g.cin; ++ci) {
        for (Index kd = 0; kd < g.k; ++kd) {
            for (Index kh = 0; kh < g.k; ++kh) {
                for (Index kw = 0; kw < g.k; ++kw, ++r) {
                    const Scalar* row = col + r * n;
                    const Index x_lo = std::max<Index>(0, g.pad - kw);
                    const Index x_hi = std::min<Index>(g.w, g.w + g.pad - kw);
                    for (Index z = z0; z < z1; ++z) {
                        const Index iz = z + kd - g.pad;
                        if (iz < 0 || iz >= g.d) {
                            continue;
                        }
                        for (Index y = 0; y < g.h; ++y) {
                            const Index iy = y + kh - g.pad;
                            if (iy < 0 || iy >= g.h) {
                                continue;
                            }
                            const Scalar* src = row + ((z - z0) * g.h + y) * g.w;
                            Scalar* dst = dx + ((ci * g.d + iz) * g.h + iy) * g.w + (kw - g.pad);
                            for (Index x = x_lo; x < x_hi; ++x) {
                                dst[x] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

ConvGeometry make_geometry(const Shape& in, const Shape& weight, const Shape& bias)
{
    if (in.size() != 4) {
        throw std::invalid_argument("conv3d: input must be [C,D,H,W], got " + shape_string(in));
    }
    if (weight.size() != 5) {
        throw std::invalid_argument("conv3d: weight must be [C_out,C_in,k,k,k], got " + shape_string(weight));
    }
    const Index k = weight[2];
    if (weight[3] != k || weight[4] != k) {
        throw std::invalid_argument("conv3d: kernel must be cubic, got " + shape_string(weight));
    }
    if (k % 2 == 0) {
        throw std::invalid_argument("conv3d: kernel size must be odd, got " + std::to_string(k));
    }
    if (weight[1] != in[0]) {
        throw std::invalid_argument("conv3d: weight expects " + std::to_string(weight[1])
                                    + " input channels, input has " + std::to_string(in[0]));
    }
    if (bias.size() != 1 || bias[0] != weight[0]) {
        throw std::invalid_argument("conv3d: bias shape " + shape_string(bias) + " does not match "
                                    + std::to_string(weight[0]) + " output channels");
    }
    return {in[0], weight[0], in[1], in[2], in[3], k, k / 2};
}

} // namespace

template <typename Scalar>
Var<Scalar> conv3d(Tape<Scalar>& tape, const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias)
{
    if (!input || !weight || !bias) {
        throw std::invalid_argument("conv3d: null input");
    }
    const ConvGeometry g = make_geometry(input->shape(), weight->shape(), bias->shape());
    const Index n_all = g.voxels();
    const Index rows = g.rows();
    const bool pointwise = g.k == 1;

    auto out = make_var(Tensor<Scalar>({g.cout, g.d, g.h, g.w}));
    Eigen::Map<const RowMat<Scalar>> wm(weight->ptr(), g.cout, rows);
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> bv(bias->ptr(), g.cout);

    parallel_for(g.chunks(), [&](Index chunk) {
        const Index z0 = chunk * g.slices_per_chunk();
        const Index z1 = std::min(g.d, z0 + g.slices_per_chunk());
        const Index c0 = z0 * g.plane();
        const Index n = (z1 - z0) * g.plane();
        StridedMap<Scalar> oc(out->ptr() + c0, g.cout, n, Eigen::OuterStride<>(n_all));
        if (pointwise) {
            ConstStridedMap<Scalar> xc(input->ptr() + c0, g.cin, n, Eigen::OuterStride<>(n_all));
            oc.noalias() = wm * xc;
        } else {
            thread_local std::vector<Scalar> col;
            col.resize(static_cast<std::size_t>(rows * n));
            im2col(input->ptr(), g, z0, z1, col.data());
            Eigen::Map<const RowMat<Scalar>> cm(col.data(), rows, n);
            oc.noalias() = wm * cm;
        }
        oc.colwise() += bv;
    });
    detail::validate_output(out, OpFamily::conv3d);

    if (detail::needs_grad(tape, {&input, &weight, &bias})) {
        out->set_requires_grad(true);
        tape.record(out, [input, weight, bias, out, g] {
            const Scalar fault = detail::fault_factor<Scalar>(OpFamily::conv3d);
            const Index n_all = g.voxels();
            const Index rows = g.rows();
            const bool pointwise = g.k == 1;
            const Scalar* gout = out->grad().data();
            Eigen::Map<const RowMat<Scalar>> wm(weight->ptr(), g.cout, rows);

            if (bias->requires_grad()) {
                Eigen::Map<const RowMat<Scalar>> go(gout, g.cout, n_all);
                bias->ensure_grad().matrix() += go.rowwise().sum();
            }
            RowMat<Scalar> dw;
            if (weight->requires_grad()) {
                dw = RowMat<Scalar>::Zero(g.cout, rows);
            }
            Scalar* dx = input->requires_grad() ? input->ensure_grad().data() : nullptr;

            std::vector<Scalar> col;
            std::vector<Scalar> dcol;
            for (Index chunk = 0; chunk < g.chunks(); ++chunk) {
                const Index z0 = chunk * g.slices_per_chunk();
                const Index z1 = std::min(g.d, z0 + g.slices_per_chunk());
                const Index c0 = z0 * g.plane();
                const Index n = (z1 - z0) * g.plane();
                ConstStridedMap<Scalar> goc(gout + c0, g.cout, n, Eigen::OuterStride<>(n_all));
                if (weight->requires_grad()) {
                    if (pointwise) {
                        ConstStridedMap<Scalar> xc(input->ptr() + c0, g.cin, n, Eigen::OuterStride<>(n_all));
                        dw.noalias() += goc * xc.transpose();
                    } else {
                        col.resize(static_cast<std::size_t>(rows * n));
                        im2col(input->ptr(), g, z0, z1, col.data());
                        Eigen::Map<const RowMat<Scalar>> cm(col.data(), rows, n);
                        dw.noalias() += goc * cm.transpose();
                    }
                }
                if (dx != nullptr) {
                    if (pointwise) {
                        StridedMap<Scalar> dxc(dx + c0, g.cin, n, Eigen::OuterStride<>(n_all));
                        dxc.noalias() += fault * (wm.transpose() * goc);
                    } else {
                        dcol.resize(static_cast<std::size_t>(rows * n));
                        Eigen::Map<RowMat<Scalar>> dcm(dcol.data(), rows, n);
                        dcm.noalias() = wm.transpose() * goc;
                        if (fault != Scalar(1)) {
                            dcm *= fault;
                        }
                        col2im(dcol.data(), g, z0, z1, dx);
                    }
                }
            }
            if (weight->requires_grad()) {
                Eigen::Map<RowMat<Scalar>>(weight->ensure_grad().data(), g.cout, rows) += dw;
            }
        });
    }
    return out;
}

template Var<float> conv3d(Tape<float>&, const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> conv3d(Tape<double>&, const Var<double>&, const Var<double>&, const Var<double>&);

} // namespace mseg
