#pragma once

#include "avmae/config.hpp"
#include "avmae/param.hpp"

#include <map>
#include <string>
#include <vector>

namespace avmae {

/// Self-describing parameter archive.  On disk: the manifest as JSON text,
/// the sentinel line, then every entry as little-endian float32 in manifest
/// order.
struct Checkpoint {
    struct Entry {
        std::string name;
        Index rows = 0;
        Index cols = 0;
        std::uint64_t offset = 0;  // bytes into the payload
        Mat<float> value;
    };

    static constexpr int format_version = 1;
    static constexpr const char* sentinel = "--AVMAE-PAYLOAD--";

    ModelConfig model;
    Stage stage = Stage::pretrain;
    int outputs = 0;  // task-head width; 0 for pretraining checkpoints
    bool regression = false;
    long step = 0;
    std::vector<Entry> entries;

    const Entry* find(const std::string& name) const;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

/// Snapshot of every parameter and buffer of `block`, offsets assigned.
template <typename Block>
Checkpoint capture(Block& block, const ModelConfig& cfg, Stage stage, int outputs = 0, bool regression = false, long step = 0)
{
    Checkpoint c;
    c.model = cfg;
    c.stage = stage;
    c.outputs = outputs;
    c.regression = regression;
    c.step = step;
    std::uint64_t offset = 0;
    for (const auto& [name, p] : param_list(block)) {
        Checkpoint::Entry e{name, p->rows, p->cols, offset, p->value.template cast<float>()};
        offset += static_cast<std::uint64_t>(e.value.size()) * 4;
        c.entries.push_back(std::move(e));
    }
    return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// The exact bytes save_checkpoint writes, and their inverse.  `source` only
/// labels error messages.
std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source = "<memory>");

struct RestoreReport {
    std::vector<std::string> loaded;
    std::vector<std::string> missing;  // in the model, not the checkpoint
    std::vector<std::string> ignored;  // in the checkpoint, not used
};

/// Copies matching entries into `params`.  The checkpoint's model config must
/// equal `cfg` (ConfigError listing every differing field otherwise).  Names
/// starting with any of `skip_prefixes` keep their current values.  A shape
/// mismatch on a shared name is a CheckpointError.
template <typename Scalar>
RestoreReport restore(const Checkpoint& c, const NamedParams<Scalar>& params, const ModelConfig& cfg,
                      const std::vector<std::string>& skip_prefixes = {});

} // namespace avmae
