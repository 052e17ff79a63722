#pragma once

#include "avmae/config.hpp"
#include "avmae/gradcheck.hpp"

#include <functional>
#include <string>
#include <vector>

namespace avmae {

struct GradSuiteEntry {
    std::string module;
    std::string block;
    GradCheckReport report;
};

/// Modules with gradient checks, in suite order.
const std::vector<std::string>& grad_modules();

/// Central-difference checks of every block in `module` ("all" for every
/// module) in double precision on Tiny-sized shapes.
std::vector<GradSuiteEntry> run_grad_suite(const std::string& module, double tolerance = 1e-4);

/// Dimension trace of a preset: token grids, regions, decoder sequences,
/// per-component parameter counts.
std::string shapes_report(const ModelConfig& cfg);

/// Parameter counts per component, in millions when `millions` is set.
struct ParamBreakdown {
    Index encoders = 0;  // patch embeddings included
    Index fusion = 0;
    Index decoders = 0;
    Index iavcl = 0;
    Index total() const { return encoders + fusion + decoders + iavcl; }
};
ParamBreakdown count_preset_parameters(const ModelConfig& cfg);

struct CriterionResult {
    std::string id;
    std::string title;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

struct VerifyOptions {
    int threads = 0;
    std::function<void(const std::string&)> progress;  // free-form progress lines
};

/// Identifiers of the library-level criteria, "A1" to "A9".
const std::vector<std::string>& criterion_ids();

CriterionResult run_criterion(const std::string& id, const VerifyOptions& opts = {});

} // namespace avmae
