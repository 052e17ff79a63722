#pragma once

#include "avmae/core.hpp"
#include "avmae/param.hpp"

#include <algorithm>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace avmae {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    Index probes = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;
    bool pass = true;

    double max_rel_error() const
    {
        double m = 0.0;
        for (const auto& e : entries)
            m = std::max(m, e.max_rel_error);
        return m;
    }

    std::string summary() const
    {
        std::ostringstream os;
        for (const auto& e : entries)
            os << "  " << (e.max_rel_error <= tolerance ? "ok  " : "FAIL") << ' ' << e.name << " max_rel_err=" << e.max_rel_error
               << " probes=" << e.probes << '\n';
        return os.str();
    }
};

struct GradCheckOptions {
    double epsilon = 1e-4;
    double tolerance = 1e-4;
    Index max_probes = 24;  // per tensor; smaller tensors are probed exhaustively
    std::uint64_t seed = 0;
};

/// One tensor under test: `value` is perturbed in place, `analytic` holds the
/// gradient the backward pass produced for it.
template <typename Scalar>
struct GradTarget {
    std::string name;
    Mat<Scalar>* value = nullptr;
    Mat<Scalar> analytic;
};

/// |a - n| / max(1, |a|, |n|)
inline double relative_error(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Central-difference check of every target against `objective`, which must
/// recompute the scalar loss from the current (perturbed) values.
template <typename Scalar>
GradCheckReport grad_check(const std::function<Scalar()>& objective, std::vector<GradTarget<Scalar>>& targets,
                           const GradCheckOptions& opts = {})
{
    GradCheckReport report;
    report.tolerance = opts.tolerance;
    Rng rng(opts.seed);
    for (auto& t : targets) {
        require_shape(t.value && t.value->rows() == t.analytic.rows() && t.value->cols() == t.analytic.cols(),
                      "grad_check: analytic gradient shape mismatch for " + t.name);
        const Index n = t.value->size();
        std::vector<Index> idx(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i)
            idx[static_cast<std::size_t>(i)] = i;
        if (n > opts.max_probes) {
            shuffle(idx, rng);
            idx.resize(static_cast<std::size_t>(opts.max_probes));
        }
        GradCheckEntry entry{t.name, 0.0, static_cast<Index>(idx.size())};
        for (Index i : idx) {
            Scalar& slot = t.value->data()[i];
            const Scalar saved = slot;
            slot = saved + Scalar(opts.epsilon);
            const double up = static_cast<double>(objective());
            slot = saved - Scalar(opts.epsilon);
            const double down = static_cast<double>(objective());
            slot = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NonFiniteError("grad_check: non-finite objective while probing " + t.name);
            const double numeric = (up - down) / (2.0 * opts.epsilon);
            entry.max_rel_error = std::max(entry.max_rel_error, relative_error(static_cast<double>(t.analytic.data()[i]), numeric));
        }
        report.pass = report.pass && entry.max_rel_error <= opts.tolerance;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

/// Targets for every trainable parameter of `block`, using its accumulated grads.
template <typename Block>
std::vector<GradTarget<typename Block::scalar_type>> parameter_targets(Block& block, const std::string& prefix = "")
{
    using Scalar = typename Block::scalar_type;
    std::vector<GradTarget<Scalar>> out;
    block.visit(prefix, [&](const std::string& name, Param<Scalar>& p) {
        if (!p.trainable())
            return;
        out.push_back({name, &p.value, p.grad.size() ? p.grad : Mat<Scalar>::Zero(p.rows, p.cols)});
    });
    return out;
}

} // namespace avmae
