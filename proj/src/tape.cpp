#include "psrlab/tape.hpp"

#include <algorithm>
#include <cmath>

#include "psrlab/common.hpp"

namespace psrlab {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void matmul_2d(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    // i-k-j ordering keeps the inner loop unit-stride on both b and c.
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        std::fill(crow, crow + n, 0.0);
        const double* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA += dC * B^T
void matmul_grad_a(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* dcrow = dc + i * n;
        double* darow = da + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = b + kk * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            darow[kk] += acc;
        }
    }
}

// dB += A^T * dC
void matmul_grad_b(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* dcrow = dc + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            double* dbrow = db + kk * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

std::vector<std::size_t> transpose_shape(const std::vector<std::size_t>& s, int a, int b) {
    std::vector<std::size_t> out = s;
    std::swap(out[static_cast<std::size_t>(a)], out[static_cast<std::size_t>(b)]);
    return out;
}

// Generic axis-swap copy for rank <= 3.
Tensor transpose_copy(const Tensor& x, int axis_a, int axis_b) {
    std::vector<std::size_t> s = x.shape;
    while (s.size() < 3) s.insert(s.begin(), 1);
    const int pad = static_cast<int>(s.size()) - static_cast<int>(x.shape.size());
    int a = axis_a + pad;
    int b = axis_b + pad;
    std::size_t perm[3] = {0, 1, 2};
    std::swap(perm[a], perm[b]);
    Tensor out(transpose_shape(x.shape, axis_a, axis_b));
    const std::size_t d0 = s[0], d1 = s[1], d2 = s[2];
    std::size_t od[3] = {s[perm[0]], s[perm[1]], s[perm[2]]};
    for (std::size_t i = 0; i < d0; ++i)
        for (std::size_t j = 0; j < d1; ++j)
            for (std::size_t k = 0; k < d2; ++k) {
                std::size_t src[3] = {i, j, k};
                const std::size_t oi = src[perm[0]], oj = src[perm[1]], ok = src[perm[2]];
                out.data[(oi * od[1] + oj) * od[2] + ok] = x.data[(i * d1 + j) * d2 + k];
            }
    return out;
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::kLeaf: return "leaf";
        case Op::kParam: return "param";
        case Op::kAdd: return "add";
        case Op::kSub: return "sub";
        case Op::kScalarMul: return "scalar_mul";
        case Op::kMul: return "mul";
        case Op::kBiasAdd: return "bias_add";
        case Op::kMatMul: return "matmul";
        case Op::kTranspose: return "transpose";
        case Op::kReshape: return "reshape";
        case Op::kConcat: return "concat";
        case Op::kSlice: return "slice";
        case Op::kMean: return "mean";
        case Op::kSum: return "sum";
        case Op::kTanh: return "tanh";
        case Op::kGelu: return "gelu";
        case Op::kExp: return "exp";
        case Op::kSoftmax: return "softmax";
        case Op::kLayerNorm: return "layer_norm";
        case Op::kGather: return "gather";
    }
    return "?";
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

int Tape::push(TapeNode&& node) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    check_value(id);
    return id;
}

void Tape::check_value(int id) {
    if (!check_finite_) return;
    const TapeNode& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.value.all_finite())
        throw NumericError("tape: non-finite value produced by op '" + std::string(op_name(n.op)) + "' at node " +
                           std::to_string(id));
}

int Tape::constant(Tensor v) {
    TapeNode n;
    n.op = Op::kLeaf;
    n.value = std::move(v);
    n.needs_grad = false;
    return push(std::move(n));
}

int Tape::param(const std::string& name, const Tensor& v) {
    TapeNode n;
    n.op = Op::kParam;
    n.value = v;
    n.param_name = name;
    n.needs_grad = true;
    return push(std::move(n));
}

#define PSRLAB_NODE(idx) nodes_[static_cast<std::size_t>(idx)]

int Tape::add(int a, int b) {
    const Tensor& x = PSRLAB_NODE(a).value;
    const Tensor& y = PSRLAB_NODE(b).value;
    if (!x.same_shape(y))
        throw DataError("tape: add shape mismatch " + x.shape_str() + " vs " + y.shape_str() + " at node " +
                        std::to_string(nodes_.size()));
    TapeNode n;
    n.op = Op::kAdd;
    n.in0 = a;
    n.in1 = b;
    n.value = x;
    for (std::size_t i = 0; i < y.data.size(); ++i) n.value.data[i] += y.data[i];
    n.needs_grad = PSRLAB_NODE(a).needs_grad || PSRLAB_NODE(b).needs_grad;
    return push(std::move(n));
}

int Tape::sub(int a, int b) {
    const Tensor& x = PSRLAB_NODE(a).value;
    const Tensor& y = PSRLAB_NODE(b).value;
    if (!x.same_shape(y))
        throw DataError("tape: sub shape mismatch " + x.shape_str() + " vs " + y.shape_str() + " at node " +
                        std::to_string(nodes_.size()));
    TapeNode n;
    n.op = Op::kSub;
    n.in0 = a;
    n.in1 = b;
    n.value = x;
    for (std::size_t i = 0; i < y.data.size(); ++i) n.value.data[i] -= y.data[i];
    n.needs_grad = PSRLAB_NODE(a).needs_grad || PSRLAB_NODE(b).needs_grad;
    return push(std::move(n));
}

int Tape::scalar_mul(int a, double s) {
    TapeNode n;
    n.op = Op::kScalarMul;
    n.in0 = a;
    n.scalar = s;
    n.value = PSRLAB_NODE(a).value;
    for (auto& v : n.value.data) v *= s;
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::mul(int a, int b) {
    const Tensor& x = PSRLAB_NODE(a).value;
    const Tensor& y = PSRLAB_NODE(b).value;
    if (!x.same_shape(y))
        throw DataError("tape: mul shape mismatch " + x.shape_str() + " vs " + y.shape_str() + " at node " +
                        std::to_string(nodes_.size()));
    TapeNode n;
    n.op = Op::kMul;
    n.in0 = a;
    n.in1 = b;
    n.value = x;
    for (std::size_t i = 0; i < y.data.size(); ++i) n.value.data[i] *= y.data[i];
    n.needs_grad = PSRLAB_NODE(a).needs_grad || PSRLAB_NODE(b).needs_grad;
    return push(std::move(n));
}

int Tape::bias_add(int a, int bias) {
    const Tensor& x = PSRLAB_NODE(a).value;
    const Tensor& b = PSRLAB_NODE(bias).value;
    if (b.rank() != 1 || x.rank() < 1 || x.shape.back() != b.shape[0])
        throw DataError("tape: bias_add expects [...,D] + [D], got " + x.shape_str() + " + " + b.shape_str() +
                        " at node " + std::to_string(nodes_.size()));
    TapeNode n;
    n.op = Op::kBiasAdd;
    n.in0 = a;
    n.in1 = bias;
    n.value = x;
    const std::size_t d = b.shape[0];
    const std::size_t rows = x.numel() / d;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) n.value.data[r * d + j] += b.data[j];
    n.needs_grad = PSRLAB_NODE(a).needs_grad || PSRLAB_NODE(bias).needs_grad;
    return push(std::move(n));
}

int Tape::matmul(int a, int b) {
    const Tensor& x = PSRLAB_NODE(a).value;
    const Tensor& y = PSRLAB_NODE(b).value;
    TapeNode n;
    n.op = Op::kMatMul;
    n.in0 = a;
    n.in1 = b;
    if (x.rank() == 2 && y.rank() == 2) {
        if (x.shape[1] != y.shape[0])
            throw DataError("tape: matmul inner dim mismatch " + x.shape_str() + " x " + y.shape_str() + " at node " +
                            std::to_string(nodes_.size()));
        n.value = Tensor({x.shape[0], y.shape[1]});
        matmul_2d(x.data.data(), y.data.data(), n.value.data.data(), x.shape[0], x.shape[1], y.shape[1]);
    } else if (x.rank() == 3 && y.rank() == 3) {
        if (x.shape[0] != y.shape[0] || x.shape[2] != y.shape[1])
            throw DataError("tape: batched matmul shape mismatch " + x.shape_str() + " x " + y.shape_str() +
                            " at node " + std::to_string(nodes_.size()));
        n.value = Tensor({x.shape[0], x.shape[1], y.shape[2]});
        const std::size_t m = x.shape[1], k = x.shape[2], cols = y.shape[2];
        for (std::size_t bi = 0; bi < x.shape[0]; ++bi)
            matmul_2d(x.data.data() + bi * m * k, y.data.data() + bi * k * cols,
                      n.value.data.data() + bi * m * cols, m, k, cols);
    } else {
        throw DataError("tape: matmul supports 2D or batched 3D operands, got " + x.shape_str() + " x " +
                        y.shape_str() + " at node " + std::to_string(nodes_.size()));
    }
    n.needs_grad = PSRLAB_NODE(a).needs_grad || PSRLAB_NODE(b).needs_grad;
    return push(std::move(n));
}

int Tape::transpose(int a, int axis_a, int axis_b) {
    const Tensor& x = PSRLAB_NODE(a).value;
    if (axis_a < 0 || axis_b < 0 || axis_a >= static_cast<int>(x.rank()) || axis_b >= static_cast<int>(x.rank()) ||
        x.rank() > 3)
        throw DataError("tape: transpose axes out of range at node " + std::to_string(nodes_.size()));
    TapeNode n;
    n.op = Op::kTranspose;
    n.in0 = a;
    n.axis_a = axis_a;
    n.axis_b = axis_b;
    n.value = transpose_copy(x, axis_a, axis_b);
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::reshape(int a, std::vector<std::size_t> new_shape) {
    const Tensor& x = PSRLAB_NODE(a).value;
    if (Tensor::numel_of(new_shape) != x.numel())
        throw DataError("tape: reshape element count mismatch at node " + std::to_string(nodes_.size()));
    TapeNode n;
    n.op = Op::kReshape;
    n.in0 = a;
    n.value = Tensor(std::move(new_shape), x.data);
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::concat(int a, int b, int axis) {
    const Tensor& x = PSRLAB_NODE(a).value;
    const Tensor& y = PSRLAB_NODE(b).value;
    if (x.rank() != y.rank() || axis < 0 || axis >= static_cast<int>(x.rank()) || x.rank() > 3)
        throw DataError("tape: concat rank/axis mismatch at node " + std::to_string(nodes_.size()));
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (static_cast<int>(i) != axis && x.shape[i] != y.shape[i])
            throw DataError("tape: concat non-axis dims must match at node " + std::to_string(nodes_.size()));
    std::vector<std::size_t> os = x.shape;
    os[static_cast<std::size_t>(axis)] += y.shape[static_cast<std::size_t>(axis)];

    TapeNode n;
    n.op = Op::kConcat;
    n.in0 = a;
    n.in1 = b;
    n.axis_a = axis;
    n.value = Tensor(os);

    // Treat the tensor as [outer, axis_dim, inner].
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < x.rank(); ++i) inner *= x.shape[i];
    const std::size_t ax = x.shape[static_cast<std::size_t>(axis)], ay = y.shape[static_cast<std::size_t>(axis)];
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(o * ax * inner),
                  x.data.begin() + static_cast<std::ptrdiff_t>((o + 1) * ax * inner),
                  n.value.data.begin() + static_cast<std::ptrdiff_t>(o * (ax + ay) * inner));
        std::copy(y.data.begin() + static_cast<std::ptrdiff_t>(o * ay * inner),
                  y.data.begin() + static_cast<std::ptrdiff_t>((o + 1) * ay * inner),
                  n.value.data.begin() + static_cast<std::ptrdiff_t>((o * (ax + ay) + ax) * inner));
    }
    n.needs_grad = PSRLAB_NODE(a).needs_grad || PSRLAB_NODE(b).needs_grad;
    return push(std::move(n));
}

int Tape::slice(int a, int axis, std::size_t start, std::size_t len) {
    const Tensor& x = PSRLAB_NODE(a).value;
    if (axis < 0 || axis >= static_cast<int>(x.rank()) || x.rank() > 3 ||
        start + len > x.shape[static_cast<std::size_t>(axis)] || len == 0)
        throw DataError("tape: slice range invalid at node " + std::to_string(nodes_.size()));
    std::vector<std::size_t> os = x.shape;
    os[static_cast<std::size_t>(axis)] = len;

    TapeNode n;
    n.op = Op::kSlice;
    n.in0 = a;
    n.axis_a = axis;
    n.start = start;
    n.len = len;
    n.value = Tensor(os);

    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < x.rank(); ++i) inner *= x.shape[i];
    const std::size_t ax = x.shape[static_cast<std::size_t>(axis)];
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(x.data.begin() + static_cast<std::ptrdiff_t>((o * ax + start) * inner),
                  x.data.begin() + static_cast<std::ptrdiff_t>((o * ax + start + len) * inner),
                  n.value.data.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::mean_all(int a) {
    const Tensor& x = PSRLAB_NODE(a).value;
    double acc = 0.0;
    for (double v : x.data) acc += v;
    TapeNode n;
    n.op = Op::kMean;
    n.in0 = a;
    n.value = Tensor::scalar(acc / static_cast<double>(x.numel()));
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::sum_all(int a) {
    const Tensor& x = PSRLAB_NODE(a).value;
    double acc = 0.0;
    for (double v : x.data) acc += v;
    TapeNode n;
    n.op = Op::kSum;
    n.in0 = a;
    n.value = Tensor::scalar(acc);
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::tanh(int a) {
    TapeNode n;
    n.op = Op::kTanh;
    n.in0 = a;
    n.value = PSRLAB_NODE(a).value;
    for (auto& v : n.value.data) v = std::tanh(v);
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::gelu(int a) {
    TapeNode n;
    n.op = Op::kGelu;
    n.in0 = a;
    n.value = PSRLAB_NODE(a).value;
    for (auto& v : n.value.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::exp(int a) {
    TapeNode n;
    n.op = Op::kExp;
    n.in0 = a;
    n.value = PSRLAB_NODE(a).value;
    for (auto& v : n.value.data) v = std::exp(v);
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::softmax_last(int a) {
    const Tensor& x = PSRLAB_NODE(a).value;
    if (x.rank() < 1) throw DataError("tape: softmax needs rank >= 1 at node " + std::to_string(nodes_.size()));
    TapeNode n;
    n.op = Op::kSoftmax;
    n.in0 = a;
    n.value = x;
    const std::size_t d = x.shape.back();
    const std::size_t rows = x.numel() / d;
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = n.value.data.data() + r * d;
        double mx = row[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double total = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        const double inv = 1.0 / total;
        for (std::size_t j = 0; j < d; ++j) row[j] *= inv;
    }
    n.needs_grad = PSRLAB_NODE(a).needs_grad;
    return push(std::move(n));
}

int Tape::layer_norm(int a, int gain, int bias) {
    const Tensor& x = PSRLAB_NODE(a).value;
    const Tensor& g = PSRLAB_NODE(gain).value;
    const Tensor& b = PSRLAB_NODE(bias).value;
    const std::size_t d = x.shape.back();
    if (g.rank() != 1 || b.rank() != 1 || g.shape[0] != d || b.shape[0] != d)
        throw DataError("tape: layer_norm affine shape mismatch at node " + std::to_string(nodes_.size()));
    TapeNode n;
    n.op = Op::kLayerNorm;
    n.in0 = a;
    n.in1 = gain;
    n.in2 = bias;
    n.value = Tensor(x.shape);
    const std::size_t rows = x.numel() / d;
    n.aux.resize(x.numel() + rows);
    double* xhat = n.aux.data();
    double* invs = n.aux.data() + x.numel();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data.data() + r * d;
        double m = 0.0;
        for (std::size_t j = 0; j < d; ++j) m += row[j];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        invs[r] = inv;
        double* orow = n.value.data.data() + r * d;
        double* hrow = xhat + r * d;
        for (std::size_t j = 0; j < d; ++j) {
            hrow[j] = (row[j] - m) * inv;
            orow[j] = hrow[j] * g.data[j] + b.data[j];
        }
    }
    n.needs_grad = PSRLAB_NODE(a).needs_grad || PSRLAB_NODE(gain).needs_grad || PSRLAB_NODE(bias).needs_grad;
    return push(std::move(n));
}

int Tape::gather_rows(int table, std::vector<std::size_t> indices) {
    const Tensor& t = PSRLAB_NODE(table).value;
    if (t.rank() != 2) throw DataError("tape: gather expects a 2D table at node " + std::to_string(nodes_.size()));
    for (std::size_t idx : indices)
        if (idx >= t.shape[0])
            throw DataError("tape: gather index out of range at node " + std::to_string(nodes_.size()));
    TapeNode n;
    n.op = Op::kGather;
    n.in0 = table;
    n.gather_idx = std::move(indices);
    const std::size_t d = t.shape[1];
    n.value = Tensor({n.gather_idx.size(), d});
    for (std::size_t i = 0; i < n.gather_idx.size(); ++i)
        std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(n.gather_idx[i] * d),
                  t.data.begin() + static_cast<std::ptrdiff_t>((n.gather_idx[i] + 1) * d),
                  n.value.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    n.needs_grad = PSRLAB_NODE(table).needs_grad;
    return push(std::move(n));
}

Tensor& Tape::grad_ref(int id) {
    TapeNode& n = PSRLAB_NODE(id);
    if (!n.grad_alloc) {
        n.grad = Tensor(n.value.shape);
        n.grad_alloc = true;
    }
    return n.grad;
}

const Tensor& Tape::grad_of(int id) const { return PSRLAB_NODE(id).grad; }

void Tape::backprop_node(int id) {
    TapeNode& n = PSRLAB_NODE(id);
    const Tensor& g = n.grad;
    switch (n.op) {
        case Op::kLeaf:
        case Op::kParam:
            return;
        case Op::kAdd: {
            if (PSRLAB_NODE(n.in0).needs_grad) {
                Tensor& ga = grad_ref(n.in0);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (PSRLAB_NODE(n.in1).needs_grad) {
                Tensor& gb = grad_ref(n.in1);
                for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
            }
            return;
        }
        case Op::kSub: {
            if (PSRLAB_NODE(n.in0).needs_grad) {
                Tensor& ga = grad_ref(n.in0);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (PSRLAB_NODE(n.in1).needs_grad) {
                Tensor& gb = grad_ref(n.in1);
                for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
            }
            return;
        }
        case Op::kScalarMul: {
            if (PSRLAB_NODE(n.in0).needs_grad) {
                Tensor& ga = grad_ref(n.in0);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * n.scalar;
            }
            return;
        }
        case Op::kMul: {
            const Tensor& a = PSRLAB_NODE(n.in0).value;
            const Tensor& b = PSRLAB_NODE(n.in1).value;
            if (PSRLAB_NODE(n.in0).needs_grad) {
                Tensor& ga = grad_ref(n.in0);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * b.data[i];
            }
            if (PSRLAB_NODE(n.in1).needs_grad) {
                Tensor& gb = grad_ref(n.in1);
                for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * a.data[i];
            }
            return;
        }
        case Op::kBiasAdd: {
            const std::size_t d = PSRLAB_NODE(n.in1).value.shape[0];
            const std::size_t rows = g.numel() / d;
            if (PSRLAB_NODE(n.in0).needs_grad) {
                Tensor& ga = grad_ref(n.in0);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (PSRLAB_NODE(n.in1).needs_grad) {
                Tensor& gb = grad_ref(n.in1);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gb.data[j] += g.data[r * d + j];
            }
            return;
        }
        case Op::kMatMul: {
            const Tensor& a = PSRLAB_NODE(n.in0).value;
            const Tensor& b = PSRLAB_NODE(n.in1).value;
            if (a.rank() == 2) {
                const std::size_t m = a.shape[0], k = a.shape[1], cols = b.shape[1];
                if (PSRLAB_NODE(n.in0).needs_grad)
                    matmul_grad_a(g.data.data(), b.data.data(), grad_ref(n.in0).data.data(), m, k, cols);
                if (PSRLAB_NODE(n.in1).needs_grad)
                    matmul_grad_b(a.data.data(), g.data.data(), grad_ref(n.in1).data.data(), m, k, cols);
            } else {
                const std::size_t bt = a.shape[0], m = a.shape[1], k = a.shape[2], cols = b.shape[2];
                for (std::size_t bi = 0; bi < bt; ++bi) {
                    if (PSRLAB_NODE(n.in0).needs_grad)
                        matmul_grad_a(g.data.data() + bi * m * cols, b.data.data() + bi * k * cols,
                                      grad_ref(n.in0).data.data() + bi * m * k, m, k, cols);
                    if (PSRLAB_NODE(n.in1).needs_grad)
                        matmul_grad_b(a.data.data() + bi * m * k, g.data.data() + bi * m * cols,
                                      grad_ref(n.in1).data.data() + bi * k * cols, m, k, cols);
                }
            }
            return;
        }
        case Op::kTranspose: {
            if (PSRLAB_NODE(n.in0).needs_grad) {
                Tensor gt = transpose_copy(g, n.axis_a, n.axis_b);
                Tensor& ga = grad_ref(n.in0);
                for (std::size_t i = 0; i < gt.data.size(); ++i) ga.data[i] += gt.data[i];
            }
            return;
        }
        case Op::kReshape: {
            if (PSRLAB_NODE(n.in0).needs_grad) {
                Tensor& ga = grad_ref(n.in0);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            return;
        }
        case Op::kConcat: {
            const Tensor& a = PSRLAB_NODE(n.in0).value;
            const Tensor& b = PSRLAB_NODE(n.in1).value;
            const int axis = n.axis_a;
            std::size_t outer = 1, inner = 1;
            for (int i = 0; i < axis; ++i) outer *= a.shape[static_cast<std::size_t>(i)];
            for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < a.rank(); ++i) inner *= a.shape[i];
            const std::size_t ax = a.shape[static_cast<std::size_t>(axis)];
            const std::size_t ay = b.shape[static_cast<std::size_t>(axis)];
            for (std::size_t o = 0; o < outer; ++o) {
                if (PSRLAB_NODE(n.in0).needs_grad) {
                    Tensor& ga = grad_ref(n.in0);
                    const double* src = g.data.data() + o * (ax + ay) * inner;
                    double* dst = ga.data.data() + o * ax * inner;
                    for (std::size_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
                }
                if (PSRLAB_NODE(n.in1).needs_grad) {
                    Tensor& gb = grad_ref(n.in1);
                    const double* src = g.data.data() + (o * (ax + ay) + ax) * inner;
                    double* dst = gb.data.data() + o * ay * inner;
                    for (std::size_t i = 0; i < ay * inner; ++i) dst[i] += src[i];
                }
            }
            return;
        }
        case Op::kSlice: {
            if (!PSRLAB_NODE(n.in0).needs_grad) return;
            const Tensor& a = PSRLAB_NODE(n.in0).value;
            Tensor& ga = grad_ref(n.in0);
            const int axis = n.axis_a;
            std::size_t outer = 1, inner = 1;
            for (int i = 0; i < axis; ++i) outer *= a.shape[static_cast<std::size_t>(i)];
            for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < a.rank(); ++i) inner *= a.shape[i];
            const std::size_t ax = a.shape[static_cast<std::size_t>(axis)];
            for (std::size_t o = 0; o < outer; ++o) {
                const double* src = g.data.data() + o * n.len * inner;
                double* dst = ga.data.data() + (o * ax + n.start) * inner;
                for (std::size_t i = 0; i < n.len * inner; ++i) dst[i] += src[i];
            }
            return;
        }
        case Op::kMean: {
            if (!PSRLAB_NODE(n.in0).needs_grad) return;
            Tensor& ga = grad_ref(n.in0);
            const double s = g.data[0] / static_cast<double>(ga.numel());
            for (auto& v : ga.data) v += s;
            return;
        }
        case Op::kSum: {
            if (!PSRLAB_NODE(n.in0).needs_grad) return;
            Tensor& ga = grad_ref(n.in0);
            const double s = g.data[0];
            for (auto& v : ga.data) v += s;
            return;
        }
        case Op::kTanh: {
            if (!PSRLAB_NODE(n.in0).needs_grad) return;
            Tensor& ga = grad_ref(n.in0);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                const double y = n.value.data[i];
                ga.data[i] += g.data[i] * (1.0 - y * y);
            }
            return;
        }
        case Op::kGelu: {
            if (!PSRLAB_NODE(n.in0).needs_grad) return;
            const Tensor& x = PSRLAB_NODE(n.in0).value;
            Tensor& ga = grad_ref(n.in0);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                const double xv = x.data[i];
                const double cdf = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv * xv);
                ga.data[i] += g.data[i] * (cdf + xv * pdf);
            }
            return;
        }
        case Op::kExp: {
            if (!PSRLAB_NODE(n.in0).needs_grad) return;
            Tensor& ga = grad_ref(n.in0);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * n.value.data[i];
            return;
        }
        case Op::kSoftmax: {
            if (!PSRLAB_NODE(n.in0).needs_grad) return;
            Tensor& ga = grad_ref(n.in0);
            const std::size_t d = n.value.shape.back();
            const std::size_t rows = n.value.numel() / d;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = n.value.data.data() + r * d;
                const double* gr = g.data.data() + r * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += gr[j] * y[j];
                double* out = ga.data.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) out[j] += y[j] * (gr[j] - dot);
            }
            return;
        }
        case Op::kLayerNorm: {
            const Tensor& gain = PSRLAB_NODE(n.in1).value;
            const std::size_t d = n.value.shape.back();
            const std::size_t rows = n.value.numel() / d;
            const double* xhat = n.aux.data();
            const double* invs = n.aux.data() + n.value.numel();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = g.data.data() + r * d;
                const double* hr = xhat + r * d;
                if (PSRLAB_NODE(n.in1).needs_grad) {
                    Tensor& gg = grad_ref(n.in1);
                    for (std::size_t j = 0; j < d; ++j) gg.data[j] += gr[j] * hr[j];
                }
                if (PSRLAB_NODE(n.in2).needs_grad) {
                    Tensor& gb = grad_ref(n.in2);
                    for (std::size_t j = 0; j < d; ++j) gb.data[j] += gr[j];
                }
                if (PSRLAB_NODE(n.in0).needs_grad) {
                    Tensor& gx = grad_ref(n.in0);
                    double mean_dy = 0.0, mean_dyh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dy = gr[j] * gain.data[j];
                        mean_dy += dy;
                        mean_dyh += dy * hr[j];
                    }
                    mean_dy /= static_cast<double>(d);
                    mean_dyh /= static_cast<double>(d);
                    double* out = gx.data.data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dy = gr[j] * gain.data[j];
                        out[j] += invs[r] * (dy - mean_dy - hr[j] * mean_dyh);
                    }
                }
            }
            return;
        }
        case Op::kGather: {
            if (!PSRLAB_NODE(n.in0).needs_grad) return;
            Tensor& gt = grad_ref(n.in0);
            const std::size_t d = gt.shape[1];
            for (std::size_t i = 0; i < n.gather_idx.size(); ++i) {
                const double* src = g.data.data() + i * d;
                double* dst = gt.data.data() + n.gather_idx[i] * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
            return;
        }
    }
}

std::map<std::string, Tensor> Tape::backward(int node) {
    const Tensor& v = PSRLAB_NODE(node).value;
    if (v.numel() != 1) throw DataError("tape: implicit backward seed requires a scalar output");
    return backward(node, Tensor::scalar(1.0));
}

std::map<std::string, Tensor> Tape::backward(int node, const Tensor& seed) {
    TapeNode& out = PSRLAB_NODE(node);
    if (!seed.same_shape(out.value))
        throw DataError("tape: backward seed shape " + seed.shape_str() + " does not match output " +
                        out.value.shape_str());
    for (auto& n : nodes_) {
        if (n.grad_alloc) {
            std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
        }
    }
    grad_ref(node) = seed;
    PSRLAB_NODE(node).grad_alloc = true;
    for (int id = node; id >= 0; --id) {
        TapeNode& n = PSRLAB_NODE(id);
        if (!n.needs_grad || !n.grad_alloc) continue;
        backprop_node(id);
    }
    std::map<std::string, Tensor> grads;
    for (const auto& n : nodes_) {
        if (n.op != Op::kParam || !n.grad_alloc) continue;
        auto it = grads.find(n.param_name);
        if (it == grads.end()) {
            grads.emplace(n.param_name, n.grad);
        } else {
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) it->second.data[i] += n.grad.data[i];
        }
    }
    return grads;
}

#undef PSRLAB_NODE

}  // namespace psrlab
