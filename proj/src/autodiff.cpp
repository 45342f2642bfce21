#include "terlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "terlab/kernels.hpp"

namespace terlab::ad {

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
constexpr double kBceEps = 1e-12;

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
} // namespace

// ---------------------------------------------------------------------------
// bookkeeping
// ---------------------------------------------------------------------------

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Tape::Node& Tape::node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
const Tape::Node& Tape::node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }

void Tape::check_owned(Var v, const char* op) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw UsageError(std::string(op) + ": variable does not belong to this tape");
}

bool Tape::any_requires_grad(std::span<const Var> vs) const {
    for (Var v : vs)
        if (node(v).requires_grad) return true;
    return false;
}

Tensor2D& Tape::grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() && n.value.size() > 0)
        n.grad = Tensor2D(n.value.rows(), n.value.cols());
    return n.grad;
}

const Tensor2D& Tape::value(Var v) const {
    check_owned(v, "value");
    return node(v).value;
}

const Tensor2D& Tape::grad(Var v) {
    check_owned(v, "grad");
    return grad_buf(v.id);
}

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

Var Tape::leaf(Tensor2D value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.requires_grad = requires_grad;
    n.value = std::move(value);
    return {this, push(std::move(n))};
}

Var Tape::matmul(Var a, Var b) {
    check_owned(a, "matmul");
    check_owned(b, "matmul");
    const Tensor2D& va = node(a).value;
    const Tensor2D& vb = node(b).value;
    if (va.cols() != vb.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + va.shape_str() + " x " +
                         vb.shape_str());
    Node n;
    n.op = Op::MatMul;
    n.nargs = 2;
    n.args = {a.id, b.id, -1, -1};
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = Tensor2D(va.rows(), vb.cols());
    kern::active().matmul_nn(va.data(), vb.data(), n.value.data(), va.rows(), va.cols(),
                             vb.cols(), false);
    return {this, push(std::move(n))};
}

Var Tape::transpose(Var a) {
    check_owned(a, "transpose");
    const Tensor2D& va = node(a).value;
    Node n;
    n.op = Op::Transpose;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.cols(), va.rows());
    for (std::size_t i = 0; i < va.rows(); ++i)
        for (std::size_t j = 0; j < va.cols(); ++j) n.value.at(j, i) = va.at(i, j);
    return {this, push(std::move(n))};
}

Var Tape::add(Var a, Var b) {
    check_owned(a, "add");
    check_owned(b, "add");
    const Tensor2D& va = node(a).value;
    const Tensor2D& vb = node(b).value;
    require_same_shape(va, vb, "add");
    Node n;
    n.op = Op::Add;
    n.nargs = 2;
    n.args = {a.id, b.id, -1, -1};
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = Tensor2D(va.rows(), va.cols());
    kern::active().add(va.data(), vb.data(), n.value.data(), va.size());
    return {this, push(std::move(n))};
}

Var Tape::sub(Var a, Var b) {
    check_owned(a, "sub");
    check_owned(b, "sub");
    const Tensor2D& va = node(a).value;
    const Tensor2D& vb = node(b).value;
    require_same_shape(va, vb, "sub");
    Node n;
    n.op = Op::Sub;
    n.nargs = 2;
    n.args = {a.id, b.id, -1, -1};
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = Tensor2D(va.rows(), va.cols());
    kern::active().sub(va.data(), vb.data(), n.value.data(), va.size());
    return {this, push(std::move(n))};
}

Var Tape::mul(Var a, Var b) {
    check_owned(a, "mul");
    check_owned(b, "mul");
    const Tensor2D& va = node(a).value;
    const Tensor2D& vb = node(b).value;
    require_same_shape(va, vb, "mul");
    Node n;
    n.op = Op::Mul;
    n.nargs = 2;
    n.args = {a.id, b.id, -1, -1};
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = Tensor2D(va.rows(), va.cols());
    kern::active().mul(va.data(), vb.data(), n.value.data(), va.size());
    return {this, push(std::move(n))};
}

Var Tape::add_row(Var x, Var row) {
    check_owned(x, "add_row");
    check_owned(row, "add_row");
    const Tensor2D& vx = node(x).value;
    const Tensor2D& vr = node(row).value;
    if (vr.rows() != 1 || vr.cols() != vx.cols())
        throw ShapeError("add_row: row vector " + vr.shape_str() + " does not broadcast over " +
                         vx.shape_str());
    Node n;
    n.op = Op::AddRow;
    n.nargs = 2;
    n.args = {x.id, row.id, -1, -1};
    n.requires_grad = node(x).requires_grad || node(row).requires_grad;
    n.value = Tensor2D(vx.rows(), vx.cols());
    for (std::size_t t = 0; t < vx.rows(); ++t)
        kern::active().add(vx.row(t), vr.data(), n.value.row(t), vx.cols());
    return {this, push(std::move(n))};
}

Var Tape::scale(Var a, double alpha) {
    check_owned(a, "scale");
    const Tensor2D& va = node(a).value;
    Node n;
    n.op = Op::Scale;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.s0 = alpha;
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.rows(), va.cols());
    kern::active().scale(va.data(), alpha, n.value.data(), va.size());
    return {this, push(std::move(n))};
}

Var Tape::gelu(Var a) {
    check_owned(a, "gelu");
    const Tensor2D& va = node(a).value;
    Node n;
    n.op = Op::Gelu;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.rows(), va.cols());
    const double* x = va.data();
    double* y = n.value.data();
    for (std::size_t i = 0; i < va.size(); ++i) {
        const double u = kGeluC * (x[i] + kGeluA * x[i] * x[i] * x[i]);
        y[i] = 0.5 * x[i] * (1.0 + std::tanh(u));
    }
    return {this, push(std::move(n))};
}

Var Tape::softmax_rows(Var a) {
    check_owned(a, "softmax_rows");
    const Tensor2D& va = node(a).value;
    if (va.cols() == 0) throw ShapeError("softmax_rows: zero columns");
    Node n;
    n.op = Op::SoftmaxRows;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.rows(), va.cols());
    const auto& k = kern::active();
    const std::size_t d = va.cols();
    std::vector<double> tmp(d);
    for (std::size_t t = 0; t < va.rows(); ++t) {
        const double* x = va.row(t);
        double* p = n.value.row(t);
        const double m = k.max(x, d);
        for (std::size_t j = 0; j < d; ++j) tmp[j] = x[j] - m;
        k.vexp(tmp.data(), p, d);
        const double z = k.sum(p, d);
        k.scale(p, 1.0 / z, p, d);
    }
    return {this, push(std::move(n))};
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
    check_owned(x, "layer_norm");
    check_owned(gain, "layer_norm");
    check_owned(bias, "layer_norm");
    const Tensor2D& vx = node(x).value;
    const Tensor2D& vg = node(gain).value;
    const Tensor2D& vb = node(bias).value;
    if (vg.rows() != 1 || vg.cols() != vx.cols() || vb.rows() != 1 || vb.cols() != vx.cols())
        throw ShapeError("layer_norm: gain " + vg.shape_str() + " / bias " + vb.shape_str() +
                         " do not match row length of " + vx.shape_str());
    Node n;
    n.op = Op::LayerNorm;
    n.nargs = 3;
    n.args = {x.id, gain.id, bias.id, -1};
    n.s0 = eps;
    n.requires_grad = node(x).requires_grad || node(gain).requires_grad || node(bias).requires_grad;
    n.value = Tensor2D(vx.rows(), vx.cols());
    n.aux.resize(2 * vx.rows());
    const std::size_t d = vx.cols();
    for (std::size_t t = 0; t < vx.rows(); ++t) {
        const double* xr = vx.row(t);
        double* yr = n.value.row(t);
        const double mu = kern::active().sum(xr, d) / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        n.aux[2 * t] = mu;
        n.aux[2 * t + 1] = inv;
        for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * inv * vg.at(0, j) + vb.at(0, j);
    }
    return {this, push(std::move(n))};
}

Var Tape::sum_all(Var a) {
    check_owned(a, "sum_all");
    const Tensor2D& va = node(a).value;
    Node n;
    n.op = Op::SumAll;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(1, 1);
    n.value.at(0, 0) = kern::active().sum(va.data(), va.size());
    return {this, push(std::move(n))};
}

Var Tape::mean_all(Var a) {
    check_owned(a, "mean_all");
    const Tensor2D& va = node(a).value;
    if (va.size() == 0) throw UsageError("mean_all: empty tensor");
    Node n;
    n.op = Op::MeanAll;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(1, 1);
    n.value.at(0, 0) = kern::active().sum(va.data(), va.size()) / static_cast<double>(va.size());
    return {this, push(std::move(n))};
}

Var Tape::row_mean(Var a) {
    check_owned(a, "row_mean");
    const Tensor2D& va = node(a).value;
    if (va.rows() == 0) throw UsageError("row_mean: no rows");
    Node n;
    n.op = Op::RowMean;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(1, va.cols());
    for (std::size_t t = 0; t < va.rows(); ++t)
        kern::active().add(n.value.data(), va.row(t), n.value.data(), va.cols());
    kern::active().scale(n.value.data(), 1.0 / static_cast<double>(va.rows()), n.value.data(),
                         va.cols());
    return {this, push(std::move(n))};
}

Var Tape::concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw UsageError("concat_rows: no operands");
    std::size_t rows = 0;
    const std::size_t cols = node(parts[0]).value.cols();
    for (Var p : parts) {
        check_owned(p, "concat_rows");
        if (node(p).value.cols() != cols)
            throw ShapeError("concat_rows: column mismatch " + node(p).value.shape_str() +
                             " vs " + node(parts[0]).value.shape_str());
        rows += node(p).value.rows();
    }
    Node n;
    n.op = Op::ConcatRows;
    n.nargs = static_cast<std::uint8_t>(std::min<std::size_t>(parts.size(), 4));
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i < 4)
            n.args[i] = parts[i].id;
        else
            n.extra_args.push_back(parts[i].id);
    }
    n.i0 = parts.size();
    n.requires_grad = any_requires_grad(parts);
    n.value = Tensor2D(rows, cols);
    std::size_t r = 0;
    for (Var p : parts) {
        const Tensor2D& vp = node(p).value;
        std::memcpy(n.value.row(r), vp.data(), vp.size() * sizeof(double));
        r += vp.rows();
    }
    return {this, push(std::move(n))};
}

Var Tape::concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw UsageError("concat_cols: no operands");
    const std::size_t rows = node(parts[0]).value.rows();
    std::size_t cols = 0;
    for (Var p : parts) {
        check_owned(p, "concat_cols");
        if (node(p).value.rows() != rows)
            throw ShapeError("concat_cols: row mismatch " + node(p).value.shape_str() + " vs " +
                             node(parts[0]).value.shape_str());
        cols += node(p).value.cols();
    }
    Node n;
    n.op = Op::ConcatCols;
    n.nargs = static_cast<std::uint8_t>(std::min<std::size_t>(parts.size(), 4));
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i < 4)
            n.args[i] = parts[i].id;
        else
            n.extra_args.push_back(parts[i].id);
    }
    n.i0 = parts.size();
    n.requires_grad = any_requires_grad(parts);
    n.value = Tensor2D(rows, cols);
    std::size_t c0 = 0;
    for (Var p : parts) {
        const Tensor2D& vp = node(p).value;
        for (std::size_t t = 0; t < rows; ++t)
            std::memcpy(n.value.row(t) + c0, vp.row(t), vp.cols() * sizeof(double));
        c0 += vp.cols();
    }
    return {this, push(std::move(n))};
}

Var Tape::slice_rows(Var a, std::size_t r0, std::size_t r1) {
    check_owned(a, "slice_rows");
    const Tensor2D& va = node(a).value;
    if (r0 > r1 || r1 > va.rows())
        throw UsageError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") out of " + va.shape_str());
    Node n;
    n.op = Op::SliceRows;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.i0 = r0;
    n.i1 = r1;
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(r1 - r0, va.cols());
    if (r1 > r0)
        std::memcpy(n.value.data(), va.row(r0), (r1 - r0) * va.cols() * sizeof(double));
    return {this, push(std::move(n))};
}

Var Tape::slice_cols(Var a, std::size_t c0, std::size_t c1) {
    check_owned(a, "slice_cols");
    const Tensor2D& va = node(a).value;
    if (c0 > c1 || c1 > va.cols())
        throw UsageError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") out of " + va.shape_str());
    Node n;
    n.op = Op::SliceCols;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.i0 = c0;
    n.i1 = c1;
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.rows(), c1 - c0);
    for (std::size_t t = 0; t < va.rows(); ++t)
        std::memcpy(n.value.row(t), va.row(t) + c0, (c1 - c0) * sizeof(double));
    return {this, push(std::move(n))};
}

Var Tape::l2_normalize_rows(Var a) {
    check_owned(a, "l2_normalize_rows");
    const Tensor2D& va = node(a).value;
    Node n;
    n.op = Op::L2NormRows;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.rows(), va.cols());
    n.aux.resize(va.rows());
    for (std::size_t t = 0; t < va.rows(); ++t) {
        const double* x = va.row(t);
        const double nrm = std::sqrt(kern::active().dot(x, x, va.cols()));
        if (!(nrm > 1e-150))
            throw NumericError("l2_normalize_rows: zero-norm embedding at row " +
                               std::to_string(t));
        const double inv = 1.0 / nrm;
        n.aux[t] = inv;
        kern::active().scale(x, inv, n.value.row(t), va.cols());
    }
    return {this, push(std::move(n))};
}

Var Tape::logsumexp_rows(Var a) {
    check_owned(a, "logsumexp_rows");
    const Tensor2D& va = node(a).value;
    if (va.cols() == 0) throw ShapeError("logsumexp_rows: zero columns");
    Node n;
    n.op = Op::LogSumExpRows;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.rows(), 1);
    const std::size_t d = va.cols();
    std::vector<double> tmp(d);
    for (std::size_t t = 0; t < va.rows(); ++t) {
        const double* x = va.row(t);
        const double m = kern::active().max(x, d);
        for (std::size_t j = 0; j < d; ++j) tmp[j] = x[j] - m;
        kern::active().vexp(tmp.data(), tmp.data(), d);
        n.value.at(t, 0) = m + std::log(kern::active().sum(tmp.data(), d));
    }
    return {this, push(std::move(n))};
}

Var Tape::diagonal(Var a) {
    check_owned(a, "diagonal");
    const Tensor2D& va = node(a).value;
    if (va.rows() != va.cols())
        throw ShapeError("diagonal: matrix is not square, " + va.shape_str());
    Node n;
    n.op = Op::Diagonal;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.rows(), 1);
    for (std::size_t i = 0; i < va.rows(); ++i) n.value.at(i, 0) = va.at(i, i);
    return {this, push(std::move(n))};
}

Var Tape::row_entropy(Var a) {
    check_owned(a, "row_entropy");
    const Tensor2D& va = node(a).value;
    if (va.cols() < 2)
        throw UsageError("row_entropy: needs at least 2 channels, got " + va.shape_str());
    Node n;
    n.op = Op::RowEntropy;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.rows(), 1);
    const std::size_t d = va.cols();
    const double hmax = std::log(static_cast<double>(d));
    // aux: softmax rows (T*D) followed by per-row expected channel value (T)
    n.aux.resize(va.rows() * d + va.rows());
    double* pbase = n.aux.data();
    double* xbar = n.aux.data() + va.rows() * d;
    std::vector<double> tmp(d);
    const auto& k = kern::active();
    for (std::size_t t = 0; t < va.rows(); ++t) {
        const double* x = va.row(t);
        double* p = pbase + t * d;
        const double m = k.max(x, d);
        for (std::size_t j = 0; j < d; ++j) tmp[j] = x[j] - m;
        k.vexp(tmp.data(), p, d);
        const double z = k.sum(p, d);
        k.scale(p, 1.0 / z, p, d);
        xbar[t] = k.dot(p, x, d);
        double h = (m - xbar[t]) + std::log(z);
        if (h < -1e-6 || h > hmax + 1e-6)
            throw NumericError("row_entropy: value " + std::to_string(h) +
                               " outside [0, ln D] at row " + std::to_string(t));
        // fp noise only; the mathematical range is exact
        n.value.at(t, 0) = std::min(std::max(h, 0.0), hmax);
    }
    return {this, push(std::move(n))};
}

Var Tape::gated_residual(Var f, Var gate, Var u) {
    check_owned(f, "gated_residual");
    check_owned(gate, "gated_residual");
    check_owned(u, "gated_residual");
    const Tensor2D& vf = node(f).value;
    const Tensor2D& vg = node(gate).value;
    const Tensor2D& vu = node(u).value;
    if (vg.rows() != 1 || vg.cols() != 1)
        throw ShapeError("gated_residual: gate must be 1x1, got " + vg.shape_str());
    require_same_shape(vf, vu, "gated_residual");
    Node n;
    n.op = Op::GatedResidual;
    n.nargs = 3;
    n.args = {f.id, gate.id, u.id, -1};
    n.requires_grad =
        node(f).requires_grad || node(gate).requires_grad || node(u).requires_grad;
    const double g = vg.at(0, 0);
    if (g == 0.0) {
        n.value = vf; // bitwise identity when the gate is closed
    } else {
        n.value = Tensor2D(vf.rows(), vf.cols());
        kern::active().scale(vu.data(), g, n.value.data(), vu.size());
        kern::active().add(vf.data(), n.value.data(), n.value.data(), vf.size());
    }
    return {this, push(std::move(n))};
}

Var Tape::sigmoid(Var a) {
    check_owned(a, "sigmoid");
    const Tensor2D& va = node(a).value;
    Node n;
    n.op = Op::Sigmoid;
    n.nargs = 1;
    n.args = {a.id, -1, -1, -1};
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor2D(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) n.value.data()[i] = stable_sigmoid(va.data()[i]);
    return {this, push(std::move(n))};
}

Var Tape::balanced_bce(Var scores,
                       const std::vector<std::pair<std::size_t, std::size_t>>& positives) {
    check_owned(scores, "balanced_bce");
    const Tensor2D& vs = node(scores).value;
    const std::size_t rows = vs.rows(), cols = vs.cols();
    Node n;
    n.op = Op::BalancedBce;
    n.nargs = 1;
    n.args = {scores.id, -1, -1, -1};
    n.requires_grad = node(scores).requires_grad;
    n.cells.reserve(positives.size());
    for (auto [i, j] : positives) {
        if (i >= rows || j >= cols)
            throw UsageError("balanced_bce: positive cell (" + std::to_string(i) + ", " +
                             std::to_string(j) + ") out of " + vs.shape_str());
        n.cells.push_back(i * cols + j);
    }
    std::sort(n.cells.begin(), n.cells.end());
    const std::size_t total = rows * cols;
    const std::size_t p = n.cells.size();
    const double w = (p > 0 && p < total)
                         ? static_cast<double>(p) / static_cast<double>(total - p)
                         : 0.0;
    const double norm = (p > 0) ? (static_cast<double>(p) + w * static_cast<double>(total - p))
                                : static_cast<double>(total);
    n.s0 = w;
    n.s1 = norm;
    double loss = 0.0;
    std::size_t c = 0;
    for (std::size_t idx = 0; idx < total; ++idx) {
        const double s = vs.data()[idx];
        if (c < p && n.cells[c] == idx) {
            loss += -std::log(std::max(s, kBceEps));
            ++c;
        } else if (w != 0.0 || p == 0) {
            loss += ((p == 0) ? 1.0 : w) * -std::log(std::max(1.0 - s, kBceEps));
        }
    }
    n.value = Tensor2D(1, 1);
    n.value.at(0, 0) = loss / norm;
    return {this, push(std::move(n))};
}

Var Tape::cross_entropy_logits(Var logits, std::size_t label) {
    check_owned(logits, "cross_entropy_logits");
    const Tensor2D& vl = node(logits).value;
    if (vl.rows() != 1) throw ShapeError("cross_entropy_logits: expected 1xC, got " + vl.shape_str());
    if (label >= vl.cols())
        throw UsageError("cross_entropy_logits: label " + std::to_string(label) + " out of " +
                         std::to_string(vl.cols()) + " classes");
    Node n;
    n.op = Op::CrossEntropyLogits;
    n.nargs = 1;
    n.args = {logits.id, -1, -1, -1};
    n.i0 = label;
    n.requires_grad = node(logits).requires_grad;
    const std::size_t d = vl.cols();
    std::vector<double> tmp(d);
    const double m = kern::active().max(vl.data(), d);
    for (std::size_t j = 0; j < d; ++j) tmp[j] = vl.data()[j] - m;
    kern::active().vexp(tmp.data(), tmp.data(), d);
    const double lse = m + std::log(kern::active().sum(tmp.data(), d));
    n.value = Tensor2D(1, 1);
    n.value.at(0, 0) = lse - vl.at(0, label);
    return {this, push(std::move(n))};
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Tape::add_to_grad(int id, const Tensor2D& g) {
    Tensor2D& dst = grad_buf(id);
    kern::active().axpy(1.0, g.data(), dst.data(), g.size());
}

void Tape::backward(Var loss) {
    check_owned(loss, "backward");
    const Tensor2D& v = node(loss).value;
    if (v.rows() != 1 || v.cols() != 1)
        throw UsageError("backward: root must be a 1x1 scalar, got " + v.shape_str());
    grad_buf(loss.id).at(0, 0) += 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.grad.empty()) continue;
        backward_node(id);
    }
}

void Tape::backward_node(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    const Tensor2D& g = n.grad;
    const auto& k = kern::active();
    auto needs = [&](int a) { return nodes_[static_cast<std::size_t>(a)].requires_grad; };

    switch (n.op) {
    case Op::Leaf:
        break;
    case Op::MatMul: {
        const int a = n.args[0], b = n.args[1];
        const Tensor2D& va = nodes_[a].value;
        const Tensor2D& vb = nodes_[b].value;
        if (needs(a))
            k.matmul_nt(g.data(), vb.data(), grad_buf(a).data(), va.rows(), vb.cols(), va.cols(),
                        true);
        if (needs(b))
            k.matmul_tn(va.data(), g.data(), grad_buf(b).data(), va.cols(), va.rows(), vb.cols(),
                        true);
        break;
    }
    case Op::Transpose: {
        const int a = n.args[0];
        if (needs(a)) {
            Tensor2D& da = grad_buf(a);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) da.at(j, i) += g.at(i, j);
        }
        break;
    }
    case Op::Add: {
        if (needs(n.args[0])) add_to_grad(n.args[0], g);
        if (needs(n.args[1])) add_to_grad(n.args[1], g);
        break;
    }
    case Op::Sub: {
        if (needs(n.args[0])) add_to_grad(n.args[0], g);
        if (needs(n.args[1]))
            k.axpy(-1.0, g.data(), grad_buf(n.args[1]).data(), g.size());
        break;
    }
    case Op::Mul: {
        const int a = n.args[0], b = n.args[1];
        if (needs(a)) k.madd(g.data(), nodes_[b].value.data(), grad_buf(a).data(), g.size());
        if (needs(b)) k.madd(g.data(), nodes_[a].value.data(), grad_buf(b).data(), g.size());
        break;
    }
    case Op::AddRow: {
        const int x = n.args[0], r = n.args[1];
        if (needs(x)) add_to_grad(x, g);
        if (needs(r)) {
            Tensor2D& dr = grad_buf(r);
            for (std::size_t t = 0; t < g.rows(); ++t)
                k.axpy(1.0, g.row(t), dr.data(), g.cols());
        }
        break;
    }
    case Op::Scale: {
        if (needs(n.args[0])) k.axpy(n.s0, g.data(), grad_buf(n.args[0]).data(), g.size());
        break;
    }
    case Op::Gelu: {
        const int a = n.args[0];
        if (!needs(a)) break;
        const Tensor2D& va = nodes_[a].value;
        Tensor2D& da = grad_buf(a);
        for (std::size_t i = 0; i < va.size(); ++i) {
            const double x = va.data()[i];
            const double u = kGeluC * (x + kGeluA * x * x * x);
            const double t = std::tanh(u);
            const double d =
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            da.data()[i] += g.data()[i] * d;
        }
        break;
    }
    case Op::SoftmaxRows: {
        const int a = n.args[0];
        if (!needs(a)) break;
        Tensor2D& da = grad_buf(a);
        const std::size_t d = n.value.cols();
        for (std::size_t t = 0; t < n.value.rows(); ++t) {
            const double* p = n.value.row(t);
            const double* gr = g.row(t);
            const double s = k.dot(gr, p, d);
            double* dar = da.row(t);
            for (std::size_t j = 0; j < d; ++j) dar[j] += p[j] * (gr[j] - s);
        }
        break;
    }
    case Op::LayerNorm: {
        const int x = n.args[0], gain = n.args[1], bias = n.args[2];
        const Tensor2D& vx = nodes_[x].value;
        const Tensor2D& vg = nodes_[gain].value;
        const std::size_t d = vx.cols();
        const double dn = static_cast<double>(d);
        std::vector<double> xhat(d), gh(d);
        for (std::size_t t = 0; t < vx.rows(); ++t) {
            const double mu = n.aux[2 * t], inv = n.aux[2 * t + 1];
            const double* xr = vx.row(t);
            const double* gr = g.row(t);
            for (std::size_t j = 0; j < d; ++j) xhat[j] = (xr[j] - mu) * inv;
            if (needs(gain)) k.madd(gr, xhat.data(), grad_buf(gain).data(), d);
            if (needs(bias)) k.axpy(1.0, gr, grad_buf(bias).data(), d);
            if (needs(x)) {
                for (std::size_t j = 0; j < d; ++j) gh[j] = gr[j] * vg.at(0, j);
                const double m1 = k.sum(gh.data(), d) / dn;
                const double m2 = k.dot(gh.data(), xhat.data(), d) / dn;
                double* dxr = grad_buf(x).row(t);
                for (std::size_t j = 0; j < d; ++j)
                    dxr[j] += inv * (gh[j] - m1 - xhat[j] * m2);
            }
        }
        break;
    }
    case Op::SumAll: {
        const int a = n.args[0];
        if (!needs(a)) break;
        Tensor2D& da = grad_buf(a);
        const double g0 = g.at(0, 0);
        for (std::size_t i = 0; i < da.size(); ++i) da.data()[i] += g0;
        break;
    }
    case Op::MeanAll: {
        const int a = n.args[0];
        if (!needs(a)) break;
        Tensor2D& da = grad_buf(a);
        const double g0 = g.at(0, 0) / static_cast<double>(da.size());
        for (std::size_t i = 0; i < da.size(); ++i) da.data()[i] += g0;
        break;
    }
    case Op::RowMean: {
        const int a = n.args[0];
        if (!needs(a)) break;
        Tensor2D& da = grad_buf(a);
        const double invt = 1.0 / static_cast<double>(da.rows());
        for (std::size_t t = 0; t < da.rows(); ++t) k.axpy(invt, g.data(), da.row(t), da.cols());
        break;
    }
    case Op::ConcatRows: {
        std::size_t r = 0;
        for (std::size_t i = 0; i < n.i0; ++i) {
            const int a = (i < 4) ? n.args[i] : n.extra_args[i - 4];
            const Tensor2D& va = nodes_[a].value;
            if (needs(a) && va.rows() > 0)
                k.axpy(1.0, g.row(r), grad_buf(a).data(), va.size());
            r += va.rows();
        }
        break;
    }
    case Op::ConcatCols: {
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < n.i0; ++i) {
            const int a = (i < 4) ? n.args[i] : n.extra_args[i - 4];
            const Tensor2D& va = nodes_[a].value;
            if (needs(a)) {
                Tensor2D& da = grad_buf(a);
                for (std::size_t t = 0; t < va.rows(); ++t)
                    k.axpy(1.0, g.row(t) + c0, da.row(t), va.cols());
            }
            c0 += va.cols();
        }
        break;
    }
    case Op::SliceRows: {
        const int a = n.args[0];
        if (needs(a) && g.rows() > 0)
            k.axpy(1.0, g.data(), grad_buf(a).row(n.i0), g.size());
        break;
    }
    case Op::SliceCols: {
        const int a = n.args[0];
        if (!needs(a)) break;
        Tensor2D& da = grad_buf(a);
        for (std::size_t t = 0; t < g.rows(); ++t)
            k.axpy(1.0, g.row(t), da.row(t) + n.i0, g.cols());
        break;
    }
    case Op::L2NormRows: {
        const int a = n.args[0];
        if (!needs(a)) break;
        Tensor2D& da = grad_buf(a);
        const std::size_t d = n.value.cols();
        for (std::size_t t = 0; t < n.value.rows(); ++t) {
            const double inv = n.aux[t];
            const double* y = n.value.row(t);
            const double* gr = g.row(t);
            const double s = k.dot(y, gr, d);
            double* dar = da.row(t);
            for (std::size_t j = 0; j < d; ++j) dar[j] += inv * (gr[j] - y[j] * s);
        }
        break;
    }
    case Op::LogSumExpRows: {
        const int a = n.args[0];
        if (!needs(a)) break;
        const Tensor2D& va = nodes_[a].value;
        Tensor2D& da = grad_buf(a);
        const std::size_t d = va.cols();
        std::vector<double> p(d);
        for (std::size_t t = 0; t < va.rows(); ++t) {
            const double y = n.value.at(t, 0);
            const double* xr = va.row(t);
            for (std::size_t j = 0; j < d; ++j) p[j] = xr[j] - y;
            k.vexp(p.data(), p.data(), d);
            k.axpy(g.at(t, 0), p.data(), da.row(t), d);
        }
        break;
    }
    case Op::Diagonal: {
        const int a = n.args[0];
        if (!needs(a)) break;
        Tensor2D& da = grad_buf(a);
        for (std::size_t i = 0; i < n.value.rows(); ++i) da.at(i, i) += g.at(i, 0);
        break;
    }
    case Op::RowEntropy: {
        const int a = n.args[0];
        if (!needs(a)) break;
        const Tensor2D& va = nodes_[a].value;
        Tensor2D& da = grad_buf(a);
        const std::size_t d = va.cols();
        const double* pbase = n.aux.data();
        const double* xbar = n.aux.data() + va.rows() * d;
        for (std::size_t t = 0; t < va.rows(); ++t) {
            const double gh = g.at(t, 0);
            if (gh == 0.0) continue;
            const double* p = pbase + t * d;
            const double* xr = va.row(t);
            double* dar = da.row(t);
            for (std::size_t j = 0; j < d; ++j) dar[j] += -gh * p[j] * (xr[j] - xbar[t]);
        }
        break;
    }
    case Op::GatedResidual: {
        const int f = n.args[0], gate = n.args[1], u = n.args[2];
        const double gv = nodes_[gate].value.at(0, 0);
        if (needs(f)) add_to_grad(f, g);
        if (needs(gate))
            grad_buf(gate).at(0, 0) += k.dot(g.data(), nodes_[u].value.data(), g.size());
        if (needs(u) && gv != 0.0) k.axpy(gv, g.data(), grad_buf(u).data(), g.size());
        break;
    }
    case Op::Sigmoid: {
        const int a = n.args[0];
        if (!needs(a)) break;
        Tensor2D& da = grad_buf(a);
        for (std::size_t i = 0; i < n.value.size(); ++i) {
            const double y = n.value.data()[i];
            da.data()[i] += g.data()[i] * y * (1.0 - y);
        }
        break;
    }
    case Op::BalancedBce: {
        const int a = n.args[0];
        if (!needs(a)) break;
        const Tensor2D& vs = nodes_[a].value;
        Tensor2D& da = grad_buf(a);
        const double g0 = g.at(0, 0);
        const double w = n.s0, norm = n.s1;
        const std::size_t p = n.cells.size();
        std::size_t c = 0;
        for (std::size_t idx = 0; idx < vs.size(); ++idx) {
            const double s = vs.data()[idx];
            if (c < p && n.cells[c] == idx) {
                if (s > kBceEps) da.data()[idx] += g0 * (-1.0 / s) / norm;
                ++c;
            } else {
                const double wn = (p == 0) ? 1.0 : w;
                if (wn != 0.0 && s < 1.0 - kBceEps)
                    da.data()[idx] += g0 * (wn / (1.0 - s)) / norm;
            }
        }
        break;
    }
    case Op::CrossEntropyLogits: {
        const int a = n.args[0];
        if (!needs(a)) break;
        const Tensor2D& vl = nodes_[a].value;
        Tensor2D& da = grad_buf(a);
        const std::size_t d = vl.cols();
        std::vector<double> p(d);
        const double m = k.max(vl.data(), d);
        for (std::size_t j = 0; j < d; ++j) p[j] = vl.data()[j] - m;
        k.vexp(p.data(), p.data(), d);
        const double z = k.sum(p.data(), d);
        const double g0 = g.at(0, 0);
        for (std::size_t j = 0; j < d; ++j) da.data()[j] += g0 * (p[j] / z - (j == n.i0 ? 1.0 : 0.0));
        break;
    }
    }
}

} // namespace terlab::ad
