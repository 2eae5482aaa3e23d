#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "taxengine/core.hpp"
#include "taxengine/rng.hpp"

namespace taxengine {

enum class Mode { Train, Infer };

/// A named tensor with its gradient accumulator. Non-trainable tensors
/// (batchnorm running statistics) ride along for checkpointing only.
struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Eigen::Index rows, Eigen::Index cols, bool train = true)
        : name(std::move(n)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)), trainable(train)
    {
    }

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParamList = std::vector<Param*>;

inline void zero_grads(std::span<Param* const> params)
{
    for (auto* p : params) {
        p->zero_grad();
    }
}

/// Additive penalty on masked logits; exp() of it underflows to exactly 0.
inline constexpr double kMaskedLogit = -1e9;

// ---------------------------------------------------------------------------
// Dense

class DenseLayer {
public:
    DenseLayer() = default;
    DenseLayer(std::size_t in, std::size_t out, const std::string& name)
        : W(name + ".W", static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)),
          b(name + ".b", 1, static_cast<Eigen::Index>(out))
    {
    }

    std::size_t in_dim() const noexcept { return static_cast<std::size_t>(W.value.cols()); }
    std::size_t out_dim() const noexcept { return static_cast<std::size_t>(W.value.rows()); }

    /// He-uniform weights, zero bias.
    void init(CounterRng& rng)
    {
        const double limit = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(1, in_dim())));
        for (Eigen::Index i = 0; i < W.value.size(); ++i) {
            W.value.data()[i] = rng.uniform(-limit, limit);
        }
        b.value.setZero();
    }

    Matrix forward(const Matrix& X)
    {
        if (static_cast<std::size_t>(X.cols()) != in_dim()) {
            fail(Errc::ShapeMismatch, W.name + " expects width " + std::to_string(in_dim()) + ", got " + shape_str(X));
        }
        input_ = X;
        has_input_ = true;
        return (X * W.value.transpose()).rowwise() + b.value.row(0);
    }

    /// Accumulates dW, db and returns dX.
    Matrix backward(const Matrix& dY)
    {
        if (!has_input_) {
            fail(Errc::InvalidState, W.name + " backward called before forward");
        }
        if (dY.rows() != input_.rows() || static_cast<std::size_t>(dY.cols()) != out_dim()) {
            fail(Errc::ShapeMismatch, W.name + " backward got " + shape_str(dY));
        }
        W.grad.noalias() += dY.transpose() * input_;
        b.grad.row(0) += dY.colwise().sum();
        return dY * W.value;
    }

    void collect(ParamList& out)
    {
        out.push_back(&W);
        out.push_back(&b);
    }

    Param W;
    Param b;

private:
    Matrix input_;
    bool has_input_ = false;
};

// ---------------------------------------------------------------------------
// ReLU

class Relu {
public:
    Matrix forward(const Matrix& X)
    {
        active_ = (X.array() > 0.0).cast<double>();
        return X.cwiseMax(0.0);
    }

    Matrix backward(const Matrix& dY) const
    {
        if (dY.rows() != active_.rows() || dY.cols() != active_.cols()) {
            fail(Errc::ShapeMismatch, "relu backward got " + shape_str(dY));
        }
        return dY.cwiseProduct(active_);
    }

private:
    Matrix active_;
};

// ---------------------------------------------------------------------------
// Softmax / cross-entropy

// Scalar std::exp on purpose: Eigen's packet exp clamps its argument and
// returns denormals instead of 0 for masked logits.
inline double exact_exp(double v) { return std::exp(v); }

inline Vector softmax(const Vector& z)
{
    const double m = z.maxCoeff();
    Vector e = (z.array() - m).unaryExpr(&exact_exp);
    return e / e.sum();
}

/// Row-wise softmax of logits (+ optional additive mask of equal shape).
inline Matrix softmax_rows(const Matrix& logits, const Matrix* additive = nullptr)
{
    Matrix z = additive ? Matrix(logits + *additive) : logits;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double m = z.row(r).maxCoeff();
        z.row(r) = (z.row(r).array() - m).unaryExpr(&exact_exp);
        z.row(r) /= z.row(r).sum();
    }
    return z;
}

inline double cross_entropy(const Vector& p, std::size_t target)
{
    if (target >= static_cast<std::size_t>(p.size())) {
        fail(Errc::IndexOutOfRange, "target " + std::to_string(target) + " outside " + std::to_string(p.size()) + " classes");
    }
    return -std::log(std::max(p(static_cast<Eigen::Index>(target)), std::numeric_limits<double>::min()));
}

struct LossGrad {
    double loss = 0.0;
    Matrix dlogits; ///< gradient with respect to the (pre-mask) logits
};

/// Mean categorical cross-entropy over the batch from row-softmax outputs.
/// Combined softmax+CE gradient is (p - onehot) / batch.
inline LossGrad softmax_cross_entropy(const Matrix& probs, std::span<const std::size_t> targets)
{
    if (static_cast<std::size_t>(probs.rows()) != targets.size()) {
        fail(Errc::ShapeMismatch, "CE: " + std::to_string(targets.size()) + " targets for " + shape_str(probs));
    }
    LossGrad out;
    out.dlogits = probs;
    const double inv_n = 1.0 / static_cast<double>(std::max<Eigen::Index>(1, probs.rows()));
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        const auto t = targets[static_cast<std::size_t>(r)];
        out.loss += cross_entropy(probs.row(r).transpose(), t);
        out.dlogits(r, static_cast<Eigen::Index>(t)) -= 1.0;
    }
    out.loss *= inv_n;
    out.dlogits *= inv_n;
    return out;
}

/// Backprop a gradient on softmax outputs to its logits: p * (dp - <dp, p>).
inline Matrix softmax_backward(const Matrix& probs, const Matrix& dprobs)
{
    const Vector inner = probs.cwiseProduct(dprobs).rowwise().sum();
    return probs.cwiseProduct(dprobs.colwise() - inner);
}

// ---------------------------------------------------------------------------
// Batch normalization

class BatchNorm {
public:
    BatchNorm() = default;
    BatchNorm(std::size_t features, const std::string& name, double momentum = 0.9, double eps = 1e-5)
        : gamma(name + ".gamma", 1, static_cast<Eigen::Index>(features)),
          beta(name + ".beta", 1, static_cast<Eigen::Index>(features)),
          running_mean(name + ".running_mean", 1, static_cast<Eigen::Index>(features), false),
          running_var(name + ".running_var", 1, static_cast<Eigen::Index>(features), false),
          momentum_(momentum), eps_(eps)
    {
        gamma.value.setOnes();
        running_var.value.setOnes();
    }

    Matrix forward(const Matrix& X, Mode mode)
    {
        if (X.cols() != gamma.value.cols()) {
            fail(Errc::ShapeMismatch, gamma.name + " expects width " + std::to_string(gamma.value.cols()) + ", got " + shape_str(X));
        }
        mode_ = mode;
        if (mode == Mode::Train) {
            if (X.rows() < 2) {
                fail(Errc::BatchTooSmall, gamma.name + " needs a batch of at least 2 in training mode");
            }
            const double n = static_cast<double>(X.rows());
            const RowVector mean = X.colwise().mean();
            const Matrix centered = X.rowwise() - mean;
            const RowVector var = centered.array().square().colwise().sum() / n;
            inv_std_ = (var.array() + eps_).rsqrt();
            xhat_ = centered.array().rowwise() * inv_std_.array();
            running_mean.value.row(0) = momentum_ * running_mean.value.row(0) + (1.0 - momentum_) * mean;
            running_var.value.row(0) = momentum_ * running_var.value.row(0) + (1.0 - momentum_) * (var * (n / (n - 1.0)));
        } else {
            inv_std_ = (running_var.value.row(0).array() + eps_).rsqrt();
            xhat_ = (X.rowwise() - running_mean.value.row(0)).array().rowwise() * inv_std_.array();
        }
        return (xhat_.array().rowwise() * gamma.value.row(0).array()).rowwise() + beta.value.row(0).array();
    }

    Matrix backward(const Matrix& dY)
    {
        if (dY.rows() != xhat_.rows() || dY.cols() != xhat_.cols()) {
            fail(Errc::ShapeMismatch, gamma.name + " backward got " + shape_str(dY));
        }
        gamma.grad.row(0) += dY.cwiseProduct(xhat_).colwise().sum();
        beta.grad.row(0) += dY.colwise().sum();
        const Matrix dxhat = dY.array().rowwise() * gamma.value.row(0).array();
        if (mode_ == Mode::Infer) {
            return dxhat.array().rowwise() * inv_std_.array();
        }
        const double n = static_cast<double>(dY.rows());
        const RowVector sum_dxhat = dxhat.colwise().sum();
        const RowVector sum_dxhat_xhat = dxhat.cwiseProduct(xhat_).colwise().sum();
        Matrix dX = (dxhat * n).rowwise() - sum_dxhat;
        dX.array() -= xhat_.array().rowwise() * sum_dxhat_xhat.array();
        return (dX.array().rowwise() * inv_std_.array()) / n;
    }

    void collect(ParamList& out)
    {
        out.push_back(&gamma);
        out.push_back(&beta);
        out.push_back(&running_mean);
        out.push_back(&running_var);
    }

    double momentum() const noexcept { return momentum_; }
    double epsilon() const noexcept { return eps_; }

    Param gamma;
    Param beta;
    Param running_mean;
    Param running_var;

private:
    double momentum_ = 0.9;
    double eps_ = 1e-5;
    Mode mode_ = Mode::Train;
    Matrix xhat_;
    RowVector inv_std_;
};

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout. The mask is a pure function of (seed, step, unit), so a
/// forward pass can be replayed exactly by passing the same step.
class Dropout {
public:
    Dropout() = default;
    Dropout(double rate, std::uint64_t seed) : rate_(rate), seed_(seed)
    {
        if (!(rate >= 0.0 && rate < 1.0)) {
            fail(Errc::InvalidConfig, "dropout rate must lie in [0, 1)");
        }
    }

    double rate() const noexcept { return rate_; }

    Matrix forward(const Matrix& X, Mode mode, std::uint64_t step)
    {
        if (mode == Mode::Infer || rate_ == 0.0) {
            scale_mask_ = Matrix::Ones(X.rows(), X.cols());
            return X;
        }
        const double keep_scale = 1.0 / (1.0 - rate_);
        const auto key = mix_keys(seed_, step);
        scale_mask_.resize(X.rows(), X.cols());
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            for (Eigen::Index c = 0; c < X.cols(); ++c) {
                const auto unit = static_cast<std::uint64_t>(r) * static_cast<std::uint64_t>(X.cols()) + static_cast<std::uint64_t>(c);
                scale_mask_(r, c) = keyed_uniform(key, unit) >= rate_ ? keep_scale : 0.0;
            }
        }
        return X.cwiseProduct(scale_mask_);
    }

    Matrix backward(const Matrix& dY) const
    {
        if (dY.rows() != scale_mask_.rows() || dY.cols() != scale_mask_.cols()) {
            fail(Errc::ShapeMismatch, "dropout backward got " + shape_str(dY));
        }
        return dY.cwiseProduct(scale_mask_);
    }

private:
    double rate_ = 0.0;
    std::uint64_t seed_ = 0;
    Matrix scale_mask_;
};

// ---------------------------------------------------------------------------
// Cross-attention

/// Single-head scaled dot-product attention from a query sequence onto a
/// key/value sequence. With pooled embeddings each side is one token, the
/// attention weight is exactly 1 and the output is the projected value.
class AttentionBlock {
public:
    AttentionBlock() = default;
    AttentionBlock(std::size_t query_dim, std::size_t kv_dim, std::size_t attn_dim, const std::string& name)
        : Wq(name + ".Wq", static_cast<Eigen::Index>(attn_dim), static_cast<Eigen::Index>(query_dim)),
          Wk(name + ".Wk", static_cast<Eigen::Index>(attn_dim), static_cast<Eigen::Index>(kv_dim)),
          Wv(name + ".Wv", static_cast<Eigen::Index>(attn_dim), static_cast<Eigen::Index>(kv_dim))
    {
    }

    std::size_t query_dim() const noexcept { return static_cast<std::size_t>(Wq.value.cols()); }
    std::size_t kv_dim() const noexcept { return static_cast<std::size_t>(Wk.value.cols()); }
    std::size_t attn_dim() const noexcept { return static_cast<std::size_t>(Wq.value.rows()); }
    double scale() const noexcept { return 1.0 / std::sqrt(static_cast<double>(attn_dim())); }

    /// Glorot-uniform projections.
    void init(CounterRng& rng)
    {
        for (Param* p : {&Wq, &Wk, &Wv}) {
            const double limit = std::sqrt(6.0 / static_cast<double>(p->value.rows() + p->value.cols()));
            for (Eigen::Index i = 0; i < p->value.size(); ++i) {
                p->value.data()[i] = rng.uniform(-limit, limit);
            }
        }
    }

    struct Result {
        Matrix out;     ///< queries x attn_dim
        Matrix weights; ///< queries x keys, row-stochastic
    };

    Result attend(const Matrix& queries, const Matrix& keys_values) const
    {
        check_inputs(queries, keys_values);
        const Matrix Q = queries * Wq.value.transpose();
        const Matrix K = keys_values * Wk.value.transpose();
        const Matrix V = keys_values * Wv.value.transpose();
        Result r;
        r.weights = softmax_rows((Q * K.transpose()) * scale());
        r.out = r.weights * V;
        return r;
    }

    struct InputGrads {
        Matrix d_queries;
        Matrix d_keys_values;
    };

    /// Recomputes the forward pass, accumulates projection gradients and
    /// returns gradients for both inputs.
    InputGrads attend_backward(const Matrix& queries, const Matrix& keys_values, const Matrix& d_out)
    {
        check_inputs(queries, keys_values);
        const Matrix Q = queries * Wq.value.transpose();
        const Matrix K = keys_values * Wk.value.transpose();
        const Matrix V = keys_values * Wv.value.transpose();
        const Matrix A = softmax_rows((Q * K.transpose()) * scale());
        if (d_out.rows() != A.rows() || static_cast<std::size_t>(d_out.cols()) != attn_dim()) {
            fail(Errc::ShapeMismatch, "attention backward got " + shape_str(d_out));
        }
        const Matrix dA = d_out * V.transpose();
        const Matrix dV = A.transpose() * d_out;
        const Matrix dS = softmax_backward(A, dA) * scale();
        const Matrix dQ = dS * K;
        const Matrix dK = dS.transpose() * Q;
        Wq.grad.noalias() += dQ.transpose() * queries;
        Wk.grad.noalias() += dK.transpose() * keys_values;
        Wv.grad.noalias() += dV.transpose() * keys_values;
        return {dQ * Wq.value, dK * Wk.value + dV * Wv.value};
    }

    /// Batch of pooled vectors: row b of `queries` attends to row b of
    /// `keys_values` only.
    Matrix forward_pooled(const Matrix& queries, const Matrix& keys_values)
    {
        if (queries.rows() != keys_values.rows()) {
            fail(Errc::ShapeMismatch, "attention batch mismatch " + shape_str(queries) + " vs " + shape_str(keys_values));
        }
        q_cache_ = queries;
        kv_cache_ = keys_values;
        has_cache_ = true;
        Matrix out(queries.rows(), static_cast<Eigen::Index>(attn_dim()));
        for (Eigen::Index b = 0; b < queries.rows(); ++b) {
            out.row(b) = attend(queries.row(b), keys_values.row(b)).out;
        }
        return out;
    }

    InputGrads backward_pooled(const Matrix& d_out)
    {
        if (!has_cache_) {
            fail(Errc::InvalidState, Wq.name + " backward called before forward");
        }
        InputGrads g{Matrix(q_cache_.rows(), q_cache_.cols()), Matrix(kv_cache_.rows(), kv_cache_.cols())};
        for (Eigen::Index b = 0; b < q_cache_.rows(); ++b) {
            auto row = attend_backward(q_cache_.row(b), kv_cache_.row(b), d_out.row(b));
            g.d_queries.row(b) = row.d_queries;
            g.d_keys_values.row(b) = row.d_keys_values;
        }
        return g;
    }

    void collect(ParamList& out)
    {
        out.push_back(&Wq);
        out.push_back(&Wk);
        out.push_back(&Wv);
    }

    Param Wq;
    Param Wk;
    Param Wv;

private:
    void check_inputs(const Matrix& queries, const Matrix& keys_values) const
    {
        if (static_cast<std::size_t>(queries.cols()) != query_dim() || static_cast<std::size_t>(keys_values.cols()) != kv_dim() ||
            keys_values.rows() < 1) {
            fail(Errc::ShapeMismatch, "attention " + Wq.name + " expects query width " + std::to_string(query_dim()) +
                                          " and key/value width " + std::to_string(kv_dim()) + ", got " +
                                          shape_str(queries) + " and " + shape_str(keys_values));
        }
    }

    Matrix q_cache_;
    Matrix kv_cache_;
    bool has_cache_ = false;
};

/// Pooled-vector cross attention for a single query/key-value pair.
inline Vector cross_attention(const Vector& query, const Vector& key_value, const AttentionBlock& block)
{
    return block.attend(query.transpose(), key_value.transpose()).out.row(0).transpose();
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed, ordered parameter list.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const noexcept { return cfg_; }
    std::uint64_t steps() const noexcept { return t_; }

    void step(std::span<Param* const> params)
    {
        if (m_.empty()) {
            for (auto* p : params) {
                m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
                v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            }
        }
        if (m_.size() != params.size()) {
            fail(Errc::ShapeMismatch, "Adam parameter list changed size");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Param& p = *params[i];
            if (!p.trainable) {
                continue;
            }
            if (p.grad.rows() != m_[i].rows() || p.grad.cols() != m_[i].cols()) {
                fail(Errc::ShapeMismatch, "Adam: gradient shape changed for " + p.name);
            }
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
            p.value.array() -= cfg_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.epsilon);
        }
    }

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    Eigen::Index worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;

    bool passed(double tol) const noexcept { return max_rel_error < tol; }
};

/// `loss(true)` must zero gradients, run forward+backward and return the
/// loss; `loss(false)` only evaluates it. Relative error per entry is
/// |a - n| / max(|a|, |n|, floor).
inline GradCheckReport grad_check(const std::function<double(bool)>& loss, std::span<Param* const> params,
                                  double h = 1e-5, double floor = 1e-6)
{
    loss(true);
    std::vector<Matrix> analytic;
    for (auto* p : params) {
        analytic.push_back(p->grad);
    }
    GradCheckReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Param& p = *params[pi];
        if (!p.trainable) {
            continue;
        }
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            const double orig = p.value.data()[i];
            p.value.data()[i] = orig + h;
            const double up = loss(false);
            p.value.data()[i] = orig - h;
            const double down = loss(false);
            p.value.data()[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[pi].data()[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            const double rel = std::abs(a - numeric) / denom;
            ++rep.checked;
            if (rel > rep.max_rel_error || rep.worst_index < 0) {
                rep.max_rel_error = std::max(rep.max_rel_error, rel);
                rep.worst_param = p.name;
                rep.worst_index = i;
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

} // namespace taxengine
