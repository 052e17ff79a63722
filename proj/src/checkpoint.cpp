#include "avmae/checkpoint.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace avmae {

using ojson = nlohmann::ordered_json;

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const
{
    for (const auto& e : entries)
        if (e.name == name)
            return &e;
    return nullptr;
}

namespace {

void put_f32(std::string& out, float v)
{
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    if constexpr (std::endian::native == std::endian::big)
        u = __builtin_bswap32(u);
    char b[4];
    std::memcpy(b, &u, 4);
    out.append(b, 4);
}

float get_f32(const char* p)
{
    std::uint32_t u;
    std::memcpy(&u, p, 4);
    if constexpr (std::endian::native == std::endian::big)
        u = __builtin_bswap32(u);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

} // namespace

std::string serialize_checkpoint(const Checkpoint& c)
{
    ojson m;
    m["format"] = "avmae-checkpoint";
    m["version"] = Checkpoint::format_version;
    m["stage"] = to_string(c.stage);
    m["step"] = c.step;
    m["outputs"] = c.outputs;
    m["regression"] = c.regression;
    m["model"] = ojson::parse(to_json(c.model));
    m["entries"] = ojson::array();
    std::string payload;
    for (const auto& e : c.entries) {
        if (e.value.rows() != e.rows || e.value.cols() != e.cols)
            throw CheckpointError("checkpoint: entry " + e.name + " has no value of shape " + shape_str(e.rows, e.cols));
        if (e.offset != payload.size())
            throw CheckpointError("checkpoint: entry " + e.name + " offset is not contiguous");
        ojson je;
        je["name"] = e.name;
        je["shape"] = {e.rows, e.cols};
        je["offset"] = e.offset;
        m["entries"].push_back(je);
        for (Index i = 0; i < e.value.size(); ++i)
            put_f32(payload, e.value.data()[i]);
    }
    m["payload_bytes"] = payload.size();
    return m.dump(1) + "\n" + Checkpoint::sentinel + "\n" + payload;
}

void save_checkpoint(const Checkpoint& c, const std::string& path)
{
    const std::string bytes = serialize_checkpoint(c);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw CheckpointError("checkpoint: cannot write " + path);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os)
        throw CheckpointError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw CheckpointError("checkpoint: cannot open " + path);
    return parse_checkpoint(std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()), path);
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& path)
{
    const std::string marker = std::string("\n") + Checkpoint::sentinel + "\n";
    const auto cut = bytes.find(marker);
    if (cut == std::string::npos)
        throw CheckpointError("checkpoint: " + path + " has no payload sentinel");

    ojson m;
    try {
        m = ojson::parse(bytes.substr(0, cut));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint: bad manifest in " + path + ": " + e.what());
    }
    if (m.value("format", "") != "avmae-checkpoint" || m.value("version", 0) != Checkpoint::format_version)
        throw CheckpointError("checkpoint: " + path + " is not a version " + std::to_string(Checkpoint::format_version) +
                              " checkpoint");

    Checkpoint c;
    c.model = model_config_from_json(m.at("model").dump());
    c.stage = stage_from_string(m.at("stage").get<std::string>());
    c.step = m.at("step").get<long>();
    c.outputs = m.at("outputs").get<int>();
    c.regression = m.at("regression").get<bool>();

    const char* payload = bytes.data() + cut + marker.size();
    const std::uint64_t available = bytes.size() - cut - marker.size();
    std::uint64_t expected = 0;
    for (const auto& je : m.at("entries")) {
        Checkpoint::Entry e;
        e.name = je.at("name").get<std::string>();
        e.rows = je.at("shape").at(0).get<Index>();
        e.cols = je.at("shape").at(1).get<Index>();
        e.offset = je.at("offset").get<std::uint64_t>();
        const std::uint64_t bytes_needed = static_cast<std::uint64_t>(e.rows * e.cols) * 4;
        if (e.offset != expected)
            throw CheckpointError("checkpoint: entry " + e.name + " offset " + std::to_string(e.offset) + " expected " +
                                  std::to_string(expected));
        if (e.offset + bytes_needed > available)
            throw CheckpointError("checkpoint: payload truncated at entry " + e.name + " (needs bytes " +
                                  std::to_string(e.offset) + ".." + std::to_string(e.offset + bytes_needed) + ", file has " +
                                  std::to_string(available) + ")");
        e.value.resize(e.rows, e.cols);
        for (Index i = 0; i < e.value.size(); ++i)
            e.value.data()[i] = get_f32(payload + e.offset + static_cast<std::uint64_t>(i) * 4);
        expected += bytes_needed;
        c.entries.push_back(std::move(e));
    }
    if (expected != available || m.value("payload_bytes", expected) != expected)
        throw CheckpointError("checkpoint: payload holds " + std::to_string(available) + " bytes, manifest describes " +
                              std::to_string(expected));
    return c;
}

template <typename Scalar>
RestoreReport restore(const Checkpoint& c, const NamedParams<Scalar>& params, const ModelConfig& cfg,
                      const std::vector<std::string>& skip_prefixes)
{
    const auto d = diff(c.model, cfg);
    if (!d.empty()) {
        std::ostringstream os;
        os << "checkpoint config does not match the model config:";
        for (const auto& line : d)
            os << "\n  " << line;
        throw ConfigError(os.str());
    }
    auto skipped = [&](const std::string& name) {
        return std::any_of(skip_prefixes.begin(), skip_prefixes.end(),
                           [&](const std::string& p) { return name.rfind(p, 0) == 0; });
    };
    RestoreReport r;
    std::set<std::string> used;
    for (const auto& [name, p] : params) {
        const Checkpoint::Entry* e = c.find(name);
        if (!e || skipped(name)) {
            r.missing.push_back(name);
            continue;
        }
        if (e->rows != p->rows || e->cols != p->cols)
            throw CheckpointError("checkpoint: entry " + name + " has shape " + shape_str(e->rows, e->cols) + ", model expects " +
                                  shape_str(p->rows, p->cols));
        p->value = e->value.template cast<Scalar>();
        used.insert(name);
        r.loaded.push_back(name);
    }
    for (const auto& e : c.entries)
        if (!used.count(e.name))
            r.ignored.push_back(e.name);
    return r;
}

template RestoreReport restore<float>(const Checkpoint&, const NamedParams<float>&, const ModelConfig&,
                                      const std::vector<std::string>&);
template RestoreReport restore<double>(const Checkpoint&, const NamedParams<double>&, const ModelConfig&,
                                       const std::vector<std::string>&);

} // namespace avmae
