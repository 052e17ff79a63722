#pragma once

#include "avmae/config.hpp"
#include "avmae/param.hpp"

#include <functional>
#include <map>
#include <string>

namespace avmae {

/// Adam with decoupled weight decay.  Moments are keyed by parameter name, so
/// the update of one tensor never depends on the others or on visit order.
template <typename Scalar>
class AdamW {
public:
    struct Slot {
        Mat<Scalar> m, v;
    };

    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamW() = default;
    AdamW(double b1, double b2, double e = 1e-8) : beta1(b1), beta2(b2), eps(e) {}

    /// One update of every trainable tensor in `params`.  `lr_scale` maps a
    /// name to its learning-rate multiplier (1 when absent).  Weight decay
    /// touches weight matrices only.  Throws NonFiniteError naming the first
    /// tensor with a non-finite gradient; nothing is modified in that case.
    void step(const NamedParams<Scalar>& params, double lr, double weight_decay,
              const std::map<std::string, double>* lr_scale = nullptr);

    long steps() const { return step_count_; }
    const std::map<std::string, Slot>& slots() const { return slots_; }

private:
    long step_count_ = 0;
    std::map<std::string, Slot> slots_;
};

/// Global L2 norm of all trainable gradients; scales them down to `max_norm`
/// when it is exceeded.  Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(const NamedParams<Scalar>& params, double max_norm);

/// Resolved step counts for one stage.
struct Schedule {
    double peak = 0.0;  // base_lr * batch / 256
    double floor = 1e-6;
    long warmup = 0;
    long total = 0;
};

/// Total steps are `cfg.steps` when set, else epochs * ceil(samples / batch);
/// warmup keeps the warmup_epochs / epochs fraction.
Schedule make_schedule(const TrainConfig& cfg, Index samples);

/// Linear warmup from 0 to the peak, then half-cosine down to the floor.
double lr_at(long step, const Schedule& s);

/// decay^(D - depth) per parameter name, with embeddings (and the initial
/// region tokens) at depth 0, encoder layer n at depth n + 1 and everything
/// else at D = encoder_depth + 1.
template <typename Scalar>
std::map<std::string, double> layer_decay_scales(const NamedParams<Scalar>& params, int encoder_depth, double decay);

/// Depth index used by layer_decay_scales; exposed for inspection.
int layer_depth(const std::string& name, int encoder_depth);

} // namespace avmae
