#include "psrlab/optim.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "psrlab/common.hpp"

namespace psrlab {

AdamResult adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, const AdamConfig& cfg) {
    for (const auto& [name, g] : grads) {
        if (!g.all_finite()) return AdamResult::kRejectedNonFinite;
        if (params.find(name) == params.end()) throw DataError("adam: gradient for unknown parameter " + name);
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        auto& m = state.first_moment[name];
        auto& v = state.second_moment[name];
        if (m.numel() == 0) m = Tensor(p.shape);
        if (v.numel() == 0) v = Tensor(p.shape);
        const auto git = grads.find(name);
        const double* g = git != grads.end() ? git->second.data.data() : nullptr;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double gi = g ? g[i] : 0.0;
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            p.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
    return AdamResult::kApplied;
}

double grad_norm(const ParamMap& grads) {
    double acc = 0.0;
    for (const auto& [name, g] : grads)
        for (double v : g.data) acc += v * v;
    return std::sqrt(acc);
}

namespace {

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("checkpoint: truncated file");
    return v;
}

constexpr char kMagic[8] = {'P', 'S', 'R', 'L', 'C', 'K', 'P', 'T'};

}  // namespace

void save_checkpoint(const std::string& path, const ParamMap& params) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("checkpoint: cannot open for write: " + tmp);
        out.write(kMagic, sizeof(kMagic));
        write_pod<std::uint32_t>(out, kCheckpointVersion);
        write_pod<std::uint32_t>(out, kEmbedProjectionSeed);
        write_pod<std::uint64_t>(out, params.size());
        for (const auto& [name, t] : params) {
            write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
            for (std::size_t d : t.shape) write_pod<std::uint64_t>(out, d);
            out.write(reinterpret_cast<const char*>(t.data.data()),
                      static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        }
        if (!out) throw DataError("checkpoint: write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

ParamMap load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    const auto version = read_pod<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw DataError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
    const auto embed_seed = read_pod<std::uint32_t>(in);
    if (embed_seed != kEmbedProjectionSeed)
        throw DataError("checkpoint: embed projection seed mismatch in " + path);
    const auto count = read_pod<std::uint64_t>(in);
    ParamMap params;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto rank = read_pod<std::uint32_t>(in);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!in) throw DataError("checkpoint: truncated tensor data in " + path);
        params.emplace(std::move(name), std::move(t));
    }
    return params;
}

}  // namespace psrlab
