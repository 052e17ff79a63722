#include "avmae/optim.hpp"

#include <algorithm>
#include <cmath>
#include <regex>

namespace avmae {

template <typename Scalar>
void AdamW<Scalar>::step(const NamedParams<Scalar>& params, double lr, double weight_decay,
                         const std::map<std::string, double>* lr_scale)
{
    for (const auto& [name, p] : params)
        if (p->trainable() && p->grad.size() > 0 && !p->grad.allFinite())
            throw NonFiniteError("non-finite gradient in " + name);

    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
    for (const auto& [name, p] : params) {
        if (!p->trainable())
            continue;
        double scale = 1.0;
        if (lr_scale) {
            const auto it = lr_scale->find(name);
            if (it != lr_scale->end())
                scale = it->second;
        }
        const double eff = lr * scale;
        Slot& s = slots_[name];
        if (s.m.size() == 0) {
            s.m = Mat<Scalar>::Zero(p->rows, p->cols);
            s.v = Mat<Scalar>::Zero(p->rows, p->cols);
        }
        if (p->kind == ParamKind::weight && weight_decay != 0.0)
            p->value *= static_cast<Scalar>(1.0 - eff * weight_decay);
        if (p->grad.size() == 0)
            continue;
        const auto& g = p->grad.array();
        s.m.array() = static_cast<Scalar>(beta1) * s.m.array() + static_cast<Scalar>(1.0 - beta1) * g;
        s.v.array() = static_cast<Scalar>(beta2) * s.v.array() + static_cast<Scalar>(1.0 - beta2) * g.square();
        p->value.array() -= static_cast<Scalar>(eff) * (s.m.array() / static_cast<Scalar>(bc1)) /
                            ((s.v.array() / static_cast<Scalar>(bc2)).sqrt() + static_cast<Scalar>(eps));
    }
}

template <typename Scalar>
double clip_grad_norm(const NamedParams<Scalar>& params, double max_norm)
{
    double sq = 0.0;
    for (const auto& [name, p] : params)
        if (p->trainable() && p->grad.size() > 0)
            sq += p->grad.template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const auto f = static_cast<Scalar>(max_norm / (norm + 1e-12));
        for (const auto& [name, p] : params)
            if (p->trainable() && p->grad.size() > 0)
                p->grad *= f;
    }
    return norm;
}

Schedule make_schedule(const TrainConfig& cfg, Index samples)
{
    if (cfg.batch < 1)
        throw ConfigError("train: batch must be >= 1");
    Schedule s;
    s.peak = cfg.base_lr * cfg.batch / 256.0;
    s.floor = cfg.min_lr;
    const long per_epoch = std::max<long>(1, static_cast<long>((samples + cfg.batch - 1) / cfg.batch));
    s.total = cfg.steps > 0 ? cfg.steps : static_cast<long>(std::ceil(cfg.epochs * static_cast<double>(per_epoch)));
    const double frac = cfg.epochs > 0 ? std::clamp(cfg.warmup_epochs / cfg.epochs, 0.0, 1.0) : 0.0;
    s.warmup = static_cast<long>(std::llround(frac * static_cast<double>(s.total)));
    return s;
}

double lr_at(long step, const Schedule& s)
{
    if (step < s.warmup)
        return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup);
    if (step >= s.total)
        return s.floor;
    const double span = static_cast<double>(s.total - s.warmup);
    const double progress = static_cast<double>(step - s.warmup) / span;
    return s.floor + (s.peak - s.floor) * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

int layer_depth(const std::string& name, int encoder_depth)
{
    static const std::regex layer(R"((^|\.)encoder\.layers\.(\d+)\.)");
    std::smatch m;
    if (std::regex_search(name, m, layer))
        return std::stoi(m[2]) + 1;
    if (name.find("embed.") != std::string::npos || name.find("encoder.region_tokens") != std::string::npos)
        return 0;
    return encoder_depth + 1;
}

template <typename Scalar>
std::map<std::string, double> layer_decay_scales(const NamedParams<Scalar>& params, int encoder_depth, double decay)
{
    std::map<std::string, double> out;
    const int top = encoder_depth + 1;
    for (const auto& [name, p] : params)
        out[name] = std::pow(decay, top - layer_depth(name, encoder_depth));
    return out;
}

#define AVMAE_INSTANTIATE(S)                                                                                \
    template class AdamW<S>;                                                                                \
    template double clip_grad_norm<S>(const NamedParams<S>&, double);                                       \
    template std::map<std::string, double> layer_decay_scales<S>(const NamedParams<S>&, int, double);

AVMAE_INSTANTIATE(float)
AVMAE_INSTANTIATE(double)

} // namespace avmae
