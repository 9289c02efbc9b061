#include "lcr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

namespace lcr {

namespace {

int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

void check_shape(const std::vector<int>& shape) {
    if (shape.empty()) throw ContractError("tensor shape must have at least one axis");
    for (int d : shape) {
        if (d < 1) throw ContractError("tensor axis sizes must be positive, got " + shape_str(shape));
    }
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape) {
    check_shape(shape);
    shape_ = std::move(shape);
    storage_ = std::make_shared<Storage>();
    storage_->data.assign(static_cast<size_t>(numel_of(shape_)), 0.0f);
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.storage_->data.begin(), t.storage_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data) {
    check_shape(shape);
    if (numel_of(shape) != static_cast<int64_t>(data.size())) {
        throw ContractError("data size " + std::to_string(data.size()) + " does not match shape " +
                            shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.storage_ = std::make_shared<Storage>();
    t.storage_->data = std::move(data);
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, float stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (float& v : t.storage_->data) v = static_cast<float>(rng.normal(0.0, stddev));
    return t;
}

int Tensor::dim(int i) const {
    if (i < 0) i += ndim();
    if (i < 0 || i >= ndim()) throw ContractError("axis index out of range");
    return shape_[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return defined() ? numel_of(shape_) : 0; }

float* Tensor::data() { return storage_->data.data(); }
const float* Tensor::data() const { return storage_->data.data(); }

float Tensor::at(std::initializer_list<int> idx) const {
    int64_t off = 0;
    size_t i = 0;
    for (int v : idx) {
        off = off * shape_[i] + v;
        ++i;
    }
    return storage_->data[static_cast<size_t>(off)];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }
void Tensor::set_requires_grad(bool v) { storage_->requires_grad = v; }

bool Tensor::has_grad() const { return storage_ && !storage_->grad.empty(); }
float* Tensor::grad() { return storage_->grad.empty() ? nullptr : storage_->grad.data(); }
const float* Tensor::grad() const { return storage_->grad.empty() ? nullptr : storage_->grad.data(); }

void Tensor::ensure_grad() {
    if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), 0.0f);
}

void Tensor::clear_grad() { storage_->grad.clear(); }

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.storage_ = std::make_shared<Storage>();
    t.storage_->data = storage_->data;
    return t;
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
    check_shape(shape);
    if (numel_of(shape) != numel()) {
        throw ContractError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                            " changes element count");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.storage_ = storage_;
    return t;
}

bool Tensor::all_finite() const {
    for (float v : storage_->data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// ---- Tape -----------------------------------------------------------------

void Tape::record(const char* name, std::vector<Tensor> inputs, const Tensor& output,
                  std::function<void()> backward_fn) {
    ops_.push_back(Op{name, std::move(inputs), output, std::move(backward_fn)});
}

void backward(Tape& tape, const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar tensor");
    }
    bool on_tape = false;
    for (size_t i = tape.ops_.size(); i-- > 0;) {
        if (tape.ops_[i].output.same_storage(loss)) {
            on_tape = true;
            break;
        }
    }
    if (!on_tape) throw ContractError("backward: loss is not an output recorded on this tape");

    Tensor seed = loss;
    seed.ensure_grad();
    seed.grad()[0] = 1.0f;

    for (size_t i = tape.ops_.size(); i-- > 0;) {
        Tape::Op& op = tape.ops_[i];
        if (!op.output.has_grad()) continue;  // not on any path to the loss
        op.backward();
    }
}

// ---- op plumbing ----------------------------------------------------------

namespace {

void maybe_record(Tape* tape, const char* name, std::vector<Tensor> inputs, Tensor& out,
                  std::function<void()> backward_fn) {
    if (!tape) return;
    bool any = false;
    for (const Tensor& t : inputs) {
        if (t.requires_grad()) {
            any = true;
            break;
        }
    }
    if (!any) return;
    out.set_requires_grad(true);
    tape->record(name, std::move(inputs), out, std::move(backward_fn));
}

// += contribution into t's grad buffer
void accum_grad(Tensor t, const float* contrib) {
    t.ensure_grad();
    float* g = t.grad();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) g[i] += contrib[i];
}

struct MatDims {
    int64_t batch;
    int m, k, n;
};

MatDims matmul_dims(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    if (a.ndim() < 2 || b.ndim() < 2 || a.ndim() != b.ndim()) {
        throw ContractError("matmul: operands must have the same rank >= 2");
    }
    int nd = a.ndim();
    int64_t batch = 1;
    for (int i = 0; i < nd - 2; ++i) {
        if (a.dim(i) != b.dim(i)) {
            throw ContractError("matmul: batch axes disagree");
        }
        batch *= a.dim(i);
    }
    int m = ta ? a.dim(nd - 1) : a.dim(nd - 2);
    int ka = ta ? a.dim(nd - 2) : a.dim(nd - 1);
    int kb = tb ? b.dim(nd - 1) : b.dim(nd - 2);
    int n = tb ? b.dim(nd - 2) : b.dim(nd - 1);
    if (ka != kb) {
        throw ContractError("matmul: inner dimensions disagree (" + std::to_string(ka) + " vs " +
                            std::to_string(kb) + ")");
    }
    return {batch, m, ka, n};
}

// c[m x n] = op(a) * op(b) for one batch item; c must be zero-initialized.
void matmul_kernel(const float* a, const float* b, float* c, int m, int k, int n, bool ta, bool tb) {
    if (!ta && !tb) {
        for (int i = 0; i < m; ++i) {
            const float* arow = a + static_cast<int64_t>(i) * k;
            float* crow = c + static_cast<int64_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                float av = arow[p];
                const float* brow = b + static_cast<int64_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!ta && tb) {
        for (int i = 0; i < m; ++i) {
            const float* arow = a + static_cast<int64_t>(i) * k;
            float* crow = c + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const float* brow = b + static_cast<int64_t>(j) * k;
                float acc = 0.0f;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] = acc;
            }
        }
    } else if (ta && !tb) {
        for (int p = 0; p < k; ++p) {
            const float* arow = a + static_cast<int64_t>(p) * m;
            const float* brow = b + static_cast<int64_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                float av = arow[i];
                float* crow = c + static_cast<int64_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (int i = 0; i < m; ++i) {
            float* crow = c + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const float* brow = b + static_cast<int64_t>(j) * k;
                float acc = 0.0f;
                for (int p = 0; p < k; ++p) acc += a[static_cast<int64_t>(p) * m + i] * brow[p];
                crow[j] = acc;
            }
        }
    }
}

}  // namespace

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b, Tape* tape) {
    MatDims d = matmul_dims(a, b, trans_a, trans_b);
    std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(d.m);
    out_shape.push_back(d.n);
    Tensor out(out_shape);

    int64_t a_stride = static_cast<int64_t>(d.m) * d.k;
    int64_t b_stride = static_cast<int64_t>(d.k) * d.n;
    int64_t c_stride = static_cast<int64_t>(d.m) * d.n;
    for (int64_t bi = 0; bi < d.batch; ++bi) {
        matmul_kernel(a.data() + bi * a_stride, b.data() + bi * b_stride, out.data() + bi * c_stride,
                      d.m, d.k, d.n, trans_a, trans_b);
    }

    maybe_record(tape, "matmul", {a, b}, out, [a, b, out, trans_a, trans_b]() {
        Tensor dc = out;  // grad lives in shared storage
        Tensor grad_c = Tensor::from_data(out.shape(),
                                          std::vector<float>(dc.grad(), dc.grad() + dc.numel()));
        if (a.requires_grad()) {
            Tensor da = trans_a ? matmul(b, grad_c, trans_b, true)
                                : matmul(grad_c, b, false, !trans_b);
            accum_grad(a, da.data());
        }
        if (b.requires_grad()) {
            Tensor db = trans_b ? matmul(grad_c, a, true, trans_a)
                                : matmul(a, grad_c, !trans_a, false);
            accum_grad(b, db.data());
        }
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.shape() != b.shape()) throw ContractError("add: shapes disagree");
    Tensor out(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];

    maybe_record(tape, "add", {a, b}, out, [a, b, out]() {
        const float* g = out.grad();
        if (a.requires_grad()) accum_grad(a, g);
        if (b.requires_grad()) accum_grad(b, g);
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.shape() != b.shape()) throw ContractError("mul: shapes disagree");
    Tensor out(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];

    maybe_record(tape, "mul", {a, b}, out, [a, b, out]() {
        const float* g = out.grad();
        int64_t n = out.numel();
        if (a.requires_grad()) {
            Tensor ta = a;
            ta.ensure_grad();
            float* ga = ta.grad();
            const float* pb = b.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
        }
        if (b.requires_grad()) {
            Tensor tb = b;
            tb.ensure_grad();
            float* gb = tb.grad();
            const float* pa = a.data();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& a, float s, Tape* tape) {
    Tensor out(a.shape());
    const float* pa = a.data();
    float* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;

    maybe_record(tape, "scale", {a}, out, [a, out, s]() {
        Tensor ta = a;
        ta.ensure_grad();
        float* ga = ta.grad();
        const float* g = out.grad();
        int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
    return out;
}

Tensor bias_add(const Tensor& x, const Tensor& bias, Tape* tape) {
    if (bias.ndim() != 1 || bias.dim(0) != x.dim(-1)) {
        throw ContractError("bias_add: bias length must equal the last axis of x");
    }
    Tensor out(x.shape());
    int n = x.dim(-1);
    int64_t rows = x.numel() / n;
    const float* px = x.data();
    const float* pb = bias.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < n; ++j) po[r * n + j] = px[r * n + j] + pb[j];
    }

    maybe_record(tape, "bias_add", {x, bias}, out, [x, bias, out]() {
        const float* g = out.grad();
        int n = x.dim(-1);
        int64_t rows = x.numel() / n;
        if (x.requires_grad()) accum_grad(x, g);
        if (bias.requires_grad()) {
            Tensor tb = bias;
            tb.ensure_grad();
            float* gb = tb.grad();
            for (int64_t r = 0; r < rows; ++r) {
                for (int j = 0; j < n; ++j) gb[j] += g[r * n + j];
            }
        }
    });
    return out;
}

namespace {

struct AxisSpan {
    int64_t outer, inner;
    int n;
};

AxisSpan axis_span(const Tensor& x, int axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim()) throw ContractError("softmax: axis out of range");
    AxisSpan s{1, 1, x.dim(axis)};
    for (int i = 0; i < axis; ++i) s.outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) s.inner *= x.dim(i);
    return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis, Tape* tape) {
    AxisSpan sp = axis_span(x, axis);
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
            int64_t base = o * sp.n * sp.inner + in;
            float mx = px[base];
            for (int t = 1; t < sp.n; ++t) mx = std::max(mx, px[base + t * sp.inner]);
            float total = 0.0f;
            for (int t = 0; t < sp.n; ++t) {
                float e = std::exp(px[base + t * sp.inner] - mx);
                po[base + t * sp.inner] = e;
                total += e;
            }
            float inv = 1.0f / total;
            for (int t = 0; t < sp.n; ++t) po[base + t * sp.inner] *= inv;
        }
    }

    maybe_record(tape, "softmax", {x}, out, [x, out, sp]() {
        Tensor tx = x;
        tx.ensure_grad();
        float* gx = tx.grad();
        const float* g = out.grad();
        const float* y = out.data();
        for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t in = 0; in < sp.inner; ++in) {
                int64_t base = o * sp.n * sp.inner + in;
                float dot = 0.0f;
                for (int t = 0; t < sp.n; ++t) dot += y[base + t * sp.inner] * g[base + t * sp.inner];
                for (int t = 0; t < sp.n; ++t) {
                    int64_t at = base + t * sp.inner;
                    gx[at] += y[at] * (g[at] - dot);
                }
            }
        }
    });
    return out;
}

Tensor log_softmax(const Tensor& x, Tape* tape) {
    int n = x.dim(-1);
    int64_t rows = x.numel() / n;
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* row = px + r * n;
        float* orow = po + r * n;
        float mx = row[0];
        for (int t = 1; t < n; ++t) mx = std::max(mx, row[t]);
        float total = 0.0f;
        for (int t = 0; t < n; ++t) total += std::exp(row[t] - mx);
        float lse = mx + std::log(total);
        for (int t = 0; t < n; ++t) orow[t] = row[t] - lse;
    }

    maybe_record(tape, "log_softmax", {x}, out, [x, out, n, rows]() {
        Tensor tx = x;
        tx.ensure_grad();
        float* gx = tx.grad();
        const float* g = out.grad();
        const float* y = out.data();
        for (int64_t r = 0; r < rows; ++r) {
            float gsum = 0.0f;
            for (int t = 0; t < n; ++t) gsum += g[r * n + t];
            for (int t = 0; t < n; ++t) {
                int64_t at = r * n + t;
                gx[at] += g[at] - std::exp(y[at]) * gsum;
            }
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps, Tape* tape) {
    int n = x.dim(-1);
    if (gamma.ndim() != 1 || gamma.dim(0) != n || beta.ndim() != 1 || beta.dim(0) != n) {
        throw ContractError("layer_norm: gamma/beta length must equal the last axis of x");
    }
    int64_t rows = x.numel() / n;
    Tensor out(x.shape());
    const float* px = x.data();
    const float* pg = gamma.data();
    const float* pb = beta.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* row = px + r * n;
        float mean = 0.0f;
        for (int t = 0; t < n; ++t) mean += row[t];
        mean /= static_cast<float>(n);
        float var = 0.0f;
        for (int t = 0; t < n; ++t) {
            float d = row[t] - mean;
            var += d * d;
        }
        var /= static_cast<float>(n);
        float inv = 1.0f / std::sqrt(var + eps);
        for (int t = 0; t < n; ++t) {
            po[r * n + t] = pg[t] * ((row[t] - mean) * inv) + pb[t];
        }
    }

    maybe_record(tape, "layer_norm", {x, gamma, beta}, out, [x, gamma, beta, out, eps, n, rows]() {
        const float* g = out.grad();
        const float* px = x.data();
        const float* pg = gamma.data();
        std::vector<float> xhat(static_cast<size_t>(n));
        for (int64_t r = 0; r < rows; ++r) {
            const float* row = px + r * n;
            float mean = 0.0f;
            for (int t = 0; t < n; ++t) mean += row[t];
            mean /= static_cast<float>(n);
            float var = 0.0f;
            for (int t = 0; t < n; ++t) {
                float d = row[t] - mean;
                var += d * d;
            }
            var /= static_cast<float>(n);
            float inv = 1.0f / std::sqrt(var + eps);
            for (int t = 0; t < n; ++t) xhat[static_cast<size_t>(t)] = (row[t] - mean) * inv;

            if (x.requires_grad()) {
                float mean_dxhat = 0.0f;
                float mean_dxhat_xhat = 0.0f;
                for (int t = 0; t < n; ++t) {
                    float dxh = g[r * n + t] * pg[t];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat[static_cast<size_t>(t)];
                }
                mean_dxhat /= static_cast<float>(n);
                mean_dxhat_xhat /= static_cast<float>(n);
                Tensor tx = x;
                tx.ensure_grad();
                float* gx = tx.grad();
                for (int t = 0; t < n; ++t) {
                    float dxh = g[r * n + t] * pg[t];
                    gx[r * n + t] +=
                        inv * (dxh - mean_dxhat - xhat[static_cast<size_t>(t)] * mean_dxhat_xhat);
                }
            }
            if (gamma.requires_grad()) {
                Tensor tg = gamma;
                tg.ensure_grad();
                float* gg = tg.grad();
                for (int t = 0; t < n; ++t) gg[t] += g[r * n + t] * xhat[static_cast<size_t>(t)];
            }
            if (beta.requires_grad()) {
                Tensor tb = beta;
                tb.ensure_grad();
                float* gb = tb.grad();
                for (int t = 0; t < n; ++t) gb[t] += g[r * n + t];
            }
        }
    });
    return out;
}

namespace {
inline float norm_cdf(float x) { return 0.5f * (1.0f + std::erf(x * 0.70710678118654752f)); }
inline float norm_pdf(float x) {
    return std::exp(-0.5f * x * x) * 0.39894228040143267f;  // 1/sqrt(2*pi)
}
}  // namespace

Tensor gelu(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * norm_cdf(px[i]);

    maybe_record(tape, "gelu", {x}, out, [x, out]() {
        Tensor tx = x;
        tx.ensure_grad();
        float* gx = tx.grad();
        const float* g = out.grad();
        const float* px = x.data();
        int64_t n = x.numel();
        for (int64_t i = 0; i < n; ++i) {
            gx[i] += g[i] * (norm_cdf(px[i]) + px[i] * norm_pdf(px[i]));
        }
    });
    return out;
}

Tensor dropout(const Tensor& x, float p, Rng& rng, Tape* tape) {
    if (p < 0.0f || p >= 1.0f) throw ContractError("dropout: p must be in [0,1)");
    if (p == 0.0f) return x;
    Tensor out(x.shape());
    int64_t n = x.numel();
    auto mask = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
    float keep_scale = 1.0f / (1.0f - p);
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
        float m = (rng.uniform() >= p) ? keep_scale : 0.0f;
        (*mask)[static_cast<size_t>(i)] = m;
        po[i] = px[i] * m;
    }

    maybe_record(tape, "dropout", {x}, out, [x, out, mask]() {
        Tensor tx = x;
        tx.ensure_grad();
        float* gx = tx.grad();
        const float* g = out.grad();
        int64_t n = x.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * (*mask)[static_cast<size_t>(i)];
    });
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) { return x.reshaped(std::move(shape)); }

Tensor permute(const Tensor& x, const std::vector<int>& axes, Tape* tape) {
    int nd = x.ndim();
    if (static_cast<int>(axes.size()) != nd) throw ContractError("permute: axes size mismatch");
    std::vector<bool> seen(static_cast<size_t>(nd), false);
    for (int a : axes) {
        if (a < 0 || a >= nd || seen[static_cast<size_t>(a)]) {
            throw ContractError("permute: invalid axis list");
        }
        seen[static_cast<size_t>(a)] = true;
    }
    std::vector<int> out_shape(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = x.dim(axes[static_cast<size_t>(i)]);

    // strides of the input, then walk the output in order
    std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i) {
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * x.dim(i + 1);
    }
    Tensor out(out_shape);
    const float* px = x.data();
    float* po = out.data();
    int64_t total = x.numel();
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    for (int64_t lin = 0; lin < total; ++lin) {
        int64_t src = 0;
        for (int i = 0; i < nd; ++i) {
            src += idx[static_cast<size_t>(i)] * in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];
        }
        po[lin] = px[src];
        for (int i = nd - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }

    maybe_record(tape, "permute", {x}, out, [x, out, axes]() {
        int nd = x.ndim();
        std::vector<int> inverse(static_cast<size_t>(nd));
        for (int i = 0; i < nd; ++i) inverse[static_cast<size_t>(axes[static_cast<size_t>(i)])] = i;
        Tensor grad_out = Tensor::from_data(out.shape(),
                                            std::vector<float>(out.grad(), out.grad() + out.numel()));
        Tensor grad_in = permute(grad_out, inverse);
        accum_grad(x, grad_in.data());
    });
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids, std::vector<int> out_shape,
                 Tape* tape) {
    if (table.ndim() != 2) throw ContractError("embedding: table must be 2-D");
    int vocab = table.dim(0);
    int d = table.dim(1);
    int64_t rows = 1;
    for (int v : out_shape) rows *= v;
    if (rows != static_cast<int64_t>(ids.size())) {
        throw ContractError("embedding: id count does not match output shape");
    }
    for (int id : ids) {
        if (id < 0 || id >= vocab) {
            throw ContractError("embedding: token id " + std::to_string(id) +
                                " outside vocabulary of size " + std::to_string(vocab));
        }
    }
    out_shape.push_back(d);
    Tensor out(out_shape);
    const float* pt = table.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(po + r * d, pt + static_cast<int64_t>(ids[static_cast<size_t>(r)]) * d,
                    sizeof(float) * static_cast<size_t>(d));
    }

    maybe_record(tape, "embedding", {table}, out, [table, out, ids, d]() {
        Tensor tt = table;
        tt.ensure_grad();
        float* gt = tt.grad();
        const float* g = out.grad();
        int64_t rows = static_cast<int64_t>(ids.size());
        for (int64_t r = 0; r < rows; ++r) {
            float* dst = gt + static_cast<int64_t>(ids[static_cast<size_t>(r)]) * d;
            const float* src = g + r * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return out;
}

Tensor masked_mean_pool(const Tensor& hidden, const Tensor& mask, Tape* tape) {
    if (hidden.ndim() != 3 || mask.ndim() != 2 || hidden.dim(0) != mask.dim(0) ||
        hidden.dim(1) != mask.dim(1)) {
        throw ContractError("masked_mean_pool: expected hidden [B,T,d] and mask [B,T]");
    }
    int B = hidden.dim(0), T = hidden.dim(1), d = hidden.dim(2);
    Tensor out({B, d});
    const float* ph = hidden.data();
    const float* pm = mask.data();
    float* po = out.data();
    for (int b = 0; b < B; ++b) {
        float count = 0.0f;
        for (int t = 0; t < T; ++t) count += pm[b * T + t];
        if (count <= 0.0f) {
            throw ContractError("masked_mean_pool: all-zero mask row (degenerate sequence)");
        }
        float inv = 1.0f / count;
        for (int t = 0; t < T; ++t) {
            if (pm[b * T + t] == 0.0f) continue;
            const float* hrow = ph + (static_cast<int64_t>(b) * T + t) * d;
            float* orow = po + static_cast<int64_t>(b) * d;
            for (int j = 0; j < d; ++j) orow[j] += hrow[j] * inv;
        }
    }

    maybe_record(tape, "masked_mean_pool", {hidden}, out, [hidden, mask, out]() {
        int B = hidden.dim(0), T = hidden.dim(1), d = hidden.dim(2);
        Tensor th = hidden;
        th.ensure_grad();
        float* gh = th.grad();
        const float* pm = mask.data();
        const float* g = out.grad();
        for (int b = 0; b < B; ++b) {
            float count = 0.0f;
            for (int t = 0; t < T; ++t) count += pm[b * T + t];
            float inv = 1.0f / count;
            for (int t = 0; t < T; ++t) {
                if (pm[b * T + t] == 0.0f) continue;
                float* hrow = gh + (static_cast<int64_t>(b) * T + t) * d;
                const float* grow = g + static_cast<int64_t>(b) * d;
                for (int j = 0; j < d; ++j) hrow[j] += grow[j] * inv;
            }
        }
    });
    return out;
}

Tensor add_attention_mask(const Tensor& scores, const Tensor& mask, Tape* tape) {
    if (scores.ndim() != 4 || mask.ndim() != 2 || scores.dim(0) != mask.dim(0) ||
        scores.dim(3) != mask.dim(1)) {
        throw ContractError("add_attention_mask: expected scores [B,H,T,T] and mask [B,T]");
    }
    constexpr float kMaskedOut = -1e9f;
    int B = scores.dim(0), H = scores.dim(1), Tq = scores.dim(2), Tk = scores.dim(3);
    Tensor out(scores.shape());
    const float* ps = scores.data();
    const float* pm = mask.data();
    float* po = out.data();
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < Tq; ++i) {
                int64_t base = ((static_cast<int64_t>(b) * H + h) * Tq + i) * Tk;
                for (int j = 0; j < Tk; ++j) {
                    po[base + j] = ps[base + j] + (pm[b * Tk + j] != 0.0f ? 0.0f : kMaskedOut);
                }
            }
        }
    }

    maybe_record(tape, "add_attention_mask", {scores}, out, [scores, out]() {
        accum_grad(scores, out.grad());
    });
    return out;
}

Tensor l2_normalize_rows(const Tensor& x, Tape* tape) {
    int n = x.dim(-1);
    int64_t rows = x.numel() / n;
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (int j = 0; j < n; ++j) {
            double v = px[r * n + j];
            ss += v * v;
        }
        if (ss == 0.0) {
            throw NumericError("l2_normalize: zero-norm row " + std::to_string(r));
        }
        float inv = static_cast<float>(1.0 / std::sqrt(ss));
        for (int j = 0; j < n; ++j) po[r * n + j] = px[r * n + j] * inv;
    }

    maybe_record(tape, "l2_normalize", {x, out}, out, [x, out, n, rows]() {
        Tensor tx = x;
        tx.ensure_grad();
        float* gx = tx.grad();
        const float* g = out.grad();
        const float* y = out.data();
        const float* px = x.data();
        for (int64_t r = 0; r < rows; ++r) {
            double ss = 0.0;
            for (int j = 0; j < n; ++j) {
                double v = px[r * n + j];
                ss += v * v;
            }
            float inv_norm = static_cast<float>(1.0 / std::sqrt(ss));
            float dot = 0.0f;
            for (int j = 0; j < n; ++j) dot += y[r * n + j] * g[r * n + j];
            for (int j = 0; j < n; ++j) {
                gx[r * n + j] += (g[r * n + j] - y[r * n + j] * dot) * inv_norm;
            }
        }
    });
    return out;
}

Tensor sum(const Tensor& x, Tape* tape) {
    Tensor out({1});
    double acc = 0.0;
    const float* px = x.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = static_cast<float>(acc);

    maybe_record(tape, "sum", {x}, out, [x, out]() {
        Tensor tx = x;
        tx.ensure_grad();
        float* gx = tx.grad();
        float g = out.grad()[0];
        int64_t n = x.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
    return out;
}

Tensor neg_mean_diag(const Tensor& x, Tape* tape) {
    if (x.ndim() != 2 || x.dim(0) != x.dim(1)) {
        throw ContractError("neg_mean_diag: expected a square matrix");
    }
    int n = x.dim(0);
    Tensor out({1});
    double acc = 0.0;
    const float* px = x.data();
    for (int i = 0; i < n; ++i) acc += px[static_cast<int64_t>(i) * n + i];
    out.data()[0] = static_cast<float>(-acc / n);

    maybe_record(tape, "neg_mean_diag", {x}, out, [x, out, n]() {
        Tensor tx = x;
        tx.ensure_grad();
        float* gx = tx.grad();
        float g = out.grad()[0];
        for (int i = 0; i < n; ++i) gx[static_cast<int64_t>(i) * n + i] += -g / static_cast<float>(n);
    });
    return out;
}

}  // namespace lcr
