#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lcr/common.hpp"

namespace lcr {

/// Dense row-major float32 tensor. Copies are shallow: they share the
/// underlying storage (and its gradient buffer), so a handle held by a model
/// and a handle captured on a tape see the same bytes. Use clone() for a
/// deep copy. The gradient buffer is absent until backward() touches it.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, float value);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data);
    static Tensor randn(std::vector<int> shape, float stddev, Rng& rng);

    bool defined() const { return storage_ != nullptr; }
    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const;
    int64_t numel() const;

    float* data();
    const float* data() const;
    float at(std::initializer_list<int> idx) const;

    bool requires_grad() const;
    void set_requires_grad(bool v);

    bool has_grad() const;
    float* grad();
    const float* grad() const;
    void ensure_grad();  // allocate zero-filled if absent
    void clear_grad();   // drop the buffer entirely

    /// Deep copy of the data; gradient buffer and requires_grad not copied.
    Tensor clone() const;

    /// Same-storage view with a different shape (numel must match).
    Tensor reshaped(std::vector<int> shape) const;

    bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }
    const void* storage_id() const { return storage_.get(); }

    bool all_finite() const;

  private:
    struct Storage {
        std::vector<float> data;
        std::vector<float> grad;  // empty means absent
        bool requires_grad = false;
    };
    std::vector<int> shape_;
    std::shared_ptr<Storage> storage_;
};

/// Reverse-mode tape. Ops append themselves in execution order, which is a
/// topological order by construction; backward() replays in reverse.
/// A tape is exclusively owned by one training step.
class Tape {
  public:
    struct Op {
        const char* name;
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> backward;
    };

    void record(const char* name, std::vector<Tensor> inputs, const Tensor& output,
                std::function<void()> backward_fn);
    size_t size() const { return ops_.size(); }
    const Op& op(size_t i) const { return ops_[i]; }
    void clear() { ops_.clear(); }

    friend void backward(Tape& tape, const Tensor& loss);

  private:
    std::vector<Op> ops_;
};

/// Populates gradient buffers of every requires_grad tensor reachable from
/// `loss`. Loss must be scalar and must be an output recorded on the tape.
void backward(Tape& tape, const Tensor& loss);

// ---- differentiable ops -------------------------------------------------
// Every op takes an optional tape. The gradient rule is recorded iff a tape
// is given and at least one input participates in grad computation; the
// output then participates as well.

/// Matrix product over the last two axes; leading axes are batched and must
/// match exactly. trans_a / trans_b transpose the last two axes of the
/// respective operand (without materializing).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false,
              Tape* tape = nullptr);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, float s, Tape* tape = nullptr);

/// Broadcast-add a [n] bias over the last axis of x [..., n].
Tensor bias_add(const Tensor& x, const Tensor& bias, Tape* tape = nullptr);

/// Numerically stabilized softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis, Tape* tape = nullptr);

/// log(softmax(x)) along the last axis.
Tensor log_softmax(const Tensor& x, Tape* tape = nullptr);

/// Per-row normalization over the last axis: gamma * (x - mean)/sqrt(var + eps) + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                  Tape* tape = nullptr);

/// Exact GELU: x * Phi(x).
Tensor gelu(const Tensor& x, Tape* tape = nullptr);

/// Inverted dropout with keep-scale 1/(1-p). Caller gates on training mode.
Tensor dropout(const Tensor& x, float p, Rng& rng, Tape* tape = nullptr);

/// Same storage, new shape.
Tensor reshape(const Tensor& x, std::vector<int> shape);

/// Axis permutation (copies; records grad as the inverse permutation).
Tensor permute(const Tensor& x, const std::vector<int>& axes, Tape* tape = nullptr);

/// Row gather: out[i] = table[ids[i]], reshaped to out_shape + [d].
Tensor embedding(const Tensor& table, const std::vector<int>& ids, std::vector<int> out_shape,
                 Tape* tape = nullptr);

/// Mean of hidden[b, t, :] over positions with mask[b, t] != 0.
/// Errors on an all-zero mask row.
Tensor masked_mean_pool(const Tensor& hidden, const Tensor& mask, Tape* tape = nullptr);

/// Additive attention mask: out[b,h,i,j] = scores[b,h,i,j] + (mask[b,j] ? 0 : -1e9).
Tensor add_attention_mask(const Tensor& scores, const Tensor& mask, Tape* tape = nullptr);

/// Rows scaled to unit L2 norm; errors on a zero-norm row.
Tensor l2_normalize_rows(const Tensor& x, Tape* tape = nullptr);

/// Sum of all elements, as a scalar (shape {1}).
Tensor sum(const Tensor& x, Tape* tape = nullptr);

/// -(1/n) * trace-mean of a square matrix: -(1/n) * sum_i x[i][i], as a scalar.
Tensor neg_mean_diag(const Tensor& x, Tape* tape = nullptr);

}  // namespace lcr
