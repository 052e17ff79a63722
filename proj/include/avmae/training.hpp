#pragma once

#include "avmae/checkpoint.hpp"
#include "avmae/config.hpp"
#include "avmae/optim.hpp"
#include "avmae/synthetic.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace avmae {

/// One line of the metrics log.  Field order is fixed.
struct MetricRecord {
    long step = 0;  // optimizer updates completed, 1-based
    Stage stage = Stage::pretrain;
    double loss = 0.0;
    double mse_video = 0.0;
    double mse_audio = 0.0;
    double info_nce = 0.0;  // sum over skip layers
    double lr = 0.0;
    double grad_norm = 0.0;
    std::optional<double> accuracy;  // eval mode, see StageRequest::eval_data

    bool operator==(const MetricRecord&) const = default;
};

std::string to_jsonl(const MetricRecord& r);

/// Worker count: `requested` when positive, else AVMAE_THREADS, else the
/// number of hardware threads.
int worker_threads(int requested = 0);

/// Runs fn(i, worker) for i in [0, n) on up to `threads` threads.  The first
/// exception is rethrown after all workers stop.
void parallel_for(Index n, int threads, const std::function<void(Index, int)>& fn);

struct StageRequest {
    Stage stage = Stage::pretrain;
    RunConfig config;
    const Dataset* data = nullptr;
    const Dataset* eval_data = nullptr;  // accuracy set; the training data when null
    const Checkpoint* init = nullptr;  // takes precedence over init_path
    std::string init_path;
    bool allow_scratch = false;  // supervised stages only: permit a missing init
    std::string out_path;        // checkpoint file; empty skips writing
    std::string metrics_path;    // JSONL; empty skips writing
    int threads = 0;
    double target_accuracy = 0.9;
    bool stop_at_target = false;
    /// Called after every logged step; returning false stops the run.
    std::function<bool(const MetricRecord&)> on_step;
};

struct StageResult {
    std::vector<MetricRecord> log;
    Checkpoint checkpoint;
    std::optional<long> steps_to_target;  // first evaluation reaching target_accuracy
    std::optional<double> final_accuracy;
    double seconds = 0.0;
};

/// Pretrain optimizes the masked reconstruction + contrastive objective over
/// the full autoencoder; the supervised stages optimize the task loss over
/// encoders, IAV-CL and the head.  Supervised stages drop the decoders and
/// fusion encoder and start from a fresh head.
StageResult run_stage(const StageRequest& req);

/// Accuracy of a supervised checkpoint on `data`, eval mode.
double evaluate_accuracy(const Checkpoint& ckpt, const Dataset& data, int threads = 0);

} // namespace avmae
