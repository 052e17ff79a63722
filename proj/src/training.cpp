#include "avmae/training.hpp"

#include "avmae/iavcl.hpp"
#include "avmae/losses.hpp"
#include "avmae/pretrain_graph.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

namespace avmae {

std::string to_jsonl(const MetricRecord& r)
{
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["stage"] = to_string(r.stage);
    j["loss"] = r.loss;
    j["mse_video"] = r.mse_video;
    j["mse_audio"] = r.mse_audio;
    j["info_nce"] = r.info_nce;
    j["lr"] = r.lr;
    j["grad_norm"] = r.grad_norm;
    j["accuracy"] = r.accuracy ? nlohmann::ordered_json(*r.accuracy) : nlohmann::ordered_json(nullptr);
    return j.dump();
}

int worker_threads(int requested)
{
    if (requested > 0)
        return requested;
    if (const char* env = std::getenv("AVMAE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0)
            return n;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(Index n, int threads, const std::function<void(Index, int)>& fn)
{
    const int workers = static_cast<int>(std::min<Index>(std::max(1, threads), n));
    if (workers <= 1) {
        for (Index i = 0; i < n; ++i)
            fn(i, 0);
        return;
    }
    std::atomic<Index> next{0};
    std::exception_ptr first;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (Index i = next++; i < n; i = next++) {
                try {
                    fn(i, w);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!first)
                        first = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& t : pool)
        t.join();
    if (first)
        std::rethrow_exception(first);
}

namespace {

using Clock = std::chrono::steady_clock;

// Model replicas for concurrent backward passes.  Each sample's gradient is
// computed alone and summed in sample order, so results do not depend on the
// number of threads.
template <typename Model>
class Workers {
public:
    Workers(Model& master, int threads) : replicas_(static_cast<std::size_t>(threads), master)
    {
        master_ = param_list(master);
        for (auto& r : replicas_)
            replica_params_.push_back(param_list(r));
        for (const auto& [name, p] : master_)
            if (p->trainable())
                total_ += p->size();
    }

    int size() const { return static_cast<int>(replicas_.size()); }
    Model& replica(int w) { return replicas_[static_cast<std::size_t>(w)]; }

    void sync()
    {
        for (auto& rp : replica_params_)
            for (std::size_t k = 0; k < rp.size(); ++k)
                rp[k].second->value = master_[k].second->value;
    }

    // Clears replica w's gradients before a fresh sample.
    void clear(int w) { zero_grads(replica(w)); }

    std::vector<float> flatten(int w) const
    {
        std::vector<float> out(static_cast<std::size_t>(total_), 0.0f);
        std::size_t at = 0;
        for (const auto& [name, p] : replica_params_[static_cast<std::size_t>(w)]) {
            if (!p->trainable())
                continue;
            if (p->grad.size() == p->size())
                std::copy(p->grad.data(), p->grad.data() + p->size(), out.begin() + static_cast<std::ptrdiff_t>(at));
            at += static_cast<std::size_t>(p->size());
        }
        return out;
    }

    void reduce(const std::vector<std::vector<float>>& grads)
    {
        std::vector<float> sum(static_cast<std::size_t>(total_), 0.0f);
        for (const auto& g : grads)
            for (std::size_t i = 0; i < sum.size(); ++i)
                sum[i] += g[i];
        std::size_t at = 0;
        for (const auto& [name, p] : master_) {
            if (!p->trainable())
                continue;
            Mat<float>& g = p->g();
            std::copy(sum.begin() + static_cast<std::ptrdiff_t>(at), sum.begin() + static_cast<std::ptrdiff_t>(at + p->size()),
                      g.data());
            at += static_cast<std::size_t>(p->size());
        }
    }

    const NamedParams<float>& master_params() const { return master_; }

private:
    std::vector<Model> replicas_;
    NamedParams<float> master_;
    std::vector<NamedParams<float>> replica_params_;
    Index total_ = 0;
};

// Epoch-wise shuffled sample order, reshuffled from (seed, epoch).
class Sampler {
public:
    Sampler(Index n, std::uint64_t seed) : n_(n), seed_(seed) {}

    std::vector<Index> batch(long step, int size)
    {
        std::vector<Index> out;
        for (int j = 0; j < size; ++j) {
            const long pos = step * size + j;
            const long epoch = pos / n_;
            if (epoch != epoch_) {
                perm_ = iota_rows(n_);
                Rng rng(derive_seed(seed_, 0x5a3d1e, static_cast<std::uint64_t>(epoch)));
                shuffle(perm_, rng);
                epoch_ = epoch;
            }
            out.push_back(perm_[static_cast<std::size_t>(pos % n_)]);
        }
        return out;
    }

private:
    Index n_;
    std::uint64_t seed_;
    long epoch_ = -1;
    std::vector<Index> perm_;
};

const Checkpoint* resolve_init(const StageRequest& req, Checkpoint& storage)
{
    if (req.init)
        return req.init;
    if (!req.init_path.empty()) {
        storage = load_checkpoint(req.init_path);
        return &storage;
    }
    return nullptr;
}

void require_data(const StageRequest& req, bool labeled)
{
    if (!req.data || req.data->size() == 0)
        throw Error(to_string(req.stage) + ": no training data");
    if (labeled && !req.data->labeled())
        throw Error(to_string(req.stage) + ": data carries no labels");
    for (const auto& clip : req.data->clips)
        require_clip_geometry(clip, req.config.model);
}

class MetricsSink {
public:
    explicit MetricsSink(const std::string& path)
    {
        if (!path.empty()) {
            os_.open(path, std::ios::trunc);
            if (!os_)
                throw Error("cannot write metrics log " + path);
        }
    }
    void write(const MetricRecord& r)
    {
        if (os_.is_open())
            os_ << to_jsonl(r) << '\n' << std::flush;
    }

private:
    std::ofstream os_;
};

double dataset_accuracy(const FinetuneModel<float>& model, const Dataset& data, int threads)
{
    std::vector<int> hit(static_cast<std::size_t>(data.size()), 0);
    parallel_for(data.size(), threads, [&](Index i, int) {
        const RowVec<float> out = model.predict(data.clips[static_cast<std::size_t>(i)]);
        Index arg = 0;
        out.maxCoeff(&arg);
        hit[static_cast<std::size_t>(i)] = arg == data.labels[static_cast<std::size_t>(i)];
    });
    int sum = 0;
    for (int h : hit)
        sum += h;
    return static_cast<double>(sum) / static_cast<double>(data.size());
}

StageResult run_pretrain(const StageRequest& req)
{
    const auto t0 = Clock::now();
    const ModelConfig& cfg = req.config.model;
    const TrainConfig& tc = req.config.train;
    require_valid(cfg);
    require_data(req, false);
    const Dataset& data = *req.data;

    InitContext ctx(derive_seed(tc.seed, 0x1417));
    PretrainModel<float> model(cfg, ctx);
    Checkpoint storage;
    if (const Checkpoint* init = resolve_init(req, storage))
        restore(*init, param_list(model), cfg);

    const int threads = worker_threads(req.threads);
    Workers<PretrainModel<float>> workers(model, threads);
    AdamW<float> opt(tc.beta1, tc.beta2);
    const Schedule sched = make_schedule(tc, data.size());
    Sampler sampler(data.size(), tc.seed);
    MetricsSink sink(req.metrics_path);
    StageResult result;

    for (long step = 0; step < sched.total; ++step) {
        const double lr = lr_at(step, sched);
        const auto idx = sampler.batch(step, tc.batch);
        const Index b = static_cast<Index>(idx.size());
        std::vector<PretrainSample<float>> samples(idx.size());
        parallel_for(b, threads, [&](Index i, int) {
            Rng mask_rng(derive_seed(tc.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i), 1));
            Rng drop_rng(derive_seed(tc.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i), 2));
            samples[static_cast<std::size_t>(i)] = model.forward_sample(data.clips[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])],
                                                                        mask_rng, DropPath{tc.drop_path, &drop_rng});
        });
        std::vector<std::vector<RowVec<float>>> dv, da;
        const PretrainLosses<float> losses = pretrain_losses(cfg, samples, &dv, &da);
        if (!std::isfinite(losses.total))
            throw NonFiniteError("pretrain: non-finite loss at step " + std::to_string(step + 1));

        workers.sync();
        std::vector<std::vector<float>> grads(idx.size());
        parallel_for(b, threads, [&](Index i, int w) {
            const auto k = static_cast<std::size_t>(i);
            workers.clear(w);
            workers.replica(w).backward_sample(samples[k], 1.0f / static_cast<float>(b), dv[k], da[k]);
            grads[k] = workers.flatten(w);
        });
        workers.reduce(grads);
        const double norm = clip_grad_norm(workers.master_params(), tc.clip_grad);
        opt.step(workers.master_params(), lr, tc.weight_decay);

        MetricRecord r;
        r.step = step + 1;
        r.stage = Stage::pretrain;
        r.loss = losses.total;
        r.mse_video = losses.mse_video;
        r.mse_audio = losses.mse_audio;
        for (float v : losses.info_nce)
            r.info_nce += v;
        r.lr = lr;
        r.grad_norm = norm;
        sink.write(r);
        result.log.push_back(r);
        if (req.on_step && !req.on_step(r))
            break;
    }

    const long done = result.log.empty() ? 0 : result.log.back().step;
    result.checkpoint = capture(model, cfg, Stage::pretrain, 0, false, done);
    if (!req.out_path.empty())
        save_checkpoint(result.checkpoint, req.out_path);
    result.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return result;
}

StageResult run_supervised(const StageRequest& req)
{
    const auto t0 = Clock::now();
    const ModelConfig& cfg = req.config.model;
    const TrainConfig& tc = req.config.train;
    require_valid(cfg);
    require_data(req, true);
    const Dataset& data = *req.data;
    const Dataset& eval = req.eval_data ? *req.eval_data : data;
    if (!tc.regression && !eval.labeled())
        throw Error(to_string(req.stage) + ": evaluation data carries no labels");
    const int outputs = tc.regression ? 1 : tc.num_classes;
    if (!tc.regression)
        for (int l : data.labels)
            if (l < 0 || l >= tc.num_classes)
                throw Error(to_string(req.stage) + ": label " + std::to_string(l) + " outside [0, " +
                            std::to_string(tc.num_classes) + ")");

    Checkpoint storage;
    const Checkpoint* init = resolve_init(req, storage);
    if (!init && !req.allow_scratch)
        throw Error(to_string(req.stage) + ": requires an initial checkpoint (--init)");

    InitContext ctx(derive_seed(tc.seed, 0x1417));
    FinetuneModel<float> model(cfg, outputs, tc.regression, ctx);
    if (init)
        restore(*init, param_list(model), cfg, {"head."});

    const int threads = worker_threads(req.threads);
    Workers<FinetuneModel<float>> workers(model, threads);
    AdamW<float> opt(tc.beta1, tc.beta2);
    const auto scales = layer_decay_scales(workers.master_params(), cfg.encoder_depth, tc.layer_decay);
    const Schedule sched = make_schedule(tc, data.size());
    Sampler sampler(data.size(), tc.seed);
    MetricsSink sink(req.metrics_path);
    StageResult result;

    for (long step = 0; step < sched.total; ++step) {
        const double lr = lr_at(step, sched);
        const auto idx = sampler.batch(step, tc.batch);
        const Index b = static_cast<Index>(idx.size());
        std::vector<FinetuneSample<float>> samples(idx.size());
        std::vector<LossValue<float>> losses(idx.size());
        parallel_for(b, threads, [&](Index i, int) {
            const auto k = static_cast<std::size_t>(i);
            const auto j = static_cast<std::size_t>(idx[k]);
            Rng drop_rng(derive_seed(tc.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i), 2));
            samples[k] = model.forward_sample(data.clips[j], Mode::train, DropPath{tc.drop_path, &drop_rng});
            if (tc.regression) {
                Mat<float> y(1, 1);
                y(0, 0) = static_cast<float>(data.labels[j]);
                losses[k] = mse<float>(samples[k].output, y);
            } else {
                losses[k] = cross_entropy_ls<float>(samples[k].output, data.labels[j], tc.label_smoothing);
            }
        });
        double loss = 0.0;
        for (const auto& l : losses)
            loss += l.value / static_cast<double>(b);
        if (!std::isfinite(loss))
            throw NonFiniteError(to_string(req.stage) + ": non-finite loss at step " + std::to_string(step + 1));

        workers.sync();
        std::vector<std::vector<float>> grads(idx.size());
        parallel_for(b, threads, [&](Index i, int w) {
            const auto k = static_cast<std::size_t>(i);
            workers.clear(w);
            workers.replica(w).backward_sample(samples[k], RowVec<float>(losses[k].grad / static_cast<float>(b)));
            grads[k] = workers.flatten(w);
        });
        workers.reduce(grads);
        const double norm = clip_grad_norm(workers.master_params(), tc.clip_grad);
        opt.step(workers.master_params(), lr, tc.weight_decay, &scales);
        for (const auto& s : samples)
            model.iavcl.update_running(s.iavcl);

        MetricRecord r;
        r.step = step + 1;
        r.stage = req.stage;
        r.loss = loss;
        r.lr = lr;
        r.grad_norm = norm;
        const bool last = step + 1 == sched.total;
        if (!tc.regression && (last || (tc.eval_every > 0 && r.step % tc.eval_every == 0))) {
            r.accuracy = dataset_accuracy(model, eval, threads);
            result.final_accuracy = r.accuracy;
            if (!result.steps_to_target && *r.accuracy >= req.target_accuracy)
                result.steps_to_target = r.step;
        }
        sink.write(r);
        result.log.push_back(r);
        if (req.on_step && !req.on_step(r))
            break;
        if (req.stop_at_target && result.steps_to_target)
            break;
    }

    const long done = result.log.empty() ? 0 : result.log.back().step;
    result.checkpoint = capture(model, cfg, req.stage, outputs, tc.regression, done);
    if (!req.out_path.empty())
        save_checkpoint(result.checkpoint, req.out_path);
    result.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return result;
}

} // namespace

StageResult run_stage(const StageRequest& req)
{
    return req.stage == Stage::pretrain ? run_pretrain(req) : run_supervised(req);
}

double evaluate_accuracy(const Checkpoint& ckpt, const Dataset& data, int threads)
{
    if (ckpt.outputs < 1 || ckpt.regression)
        throw Error("evaluate_accuracy: checkpoint has no classification head");
    if (!data.labeled())
        throw Error("evaluate_accuracy: data carries no labels");
    InitContext ctx(0);
    FinetuneModel<float> model(ckpt.model, ckpt.outputs, false, ctx);
    restore(ckpt, param_list(model), ckpt.model);
    return dataset_accuracy(model, data, worker_threads(threads));
}

} // namespace avmae
