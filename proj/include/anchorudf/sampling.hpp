#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "anchorudf/bvh.hpp"
#include "anchorudf/common.hpp"
#include "anchorudf/mesh.hpp"
#include "anchorudf/parallel.hpp"
#include "anchorudf/rng.hpp"

namespace audf {

// Mixture of per-axis Gaussian displacement scales applied to surface points.
// Defaults: 1% at sigma 0.08, 49% at 0.02, 50% at 0.003 (normalized units).
struct SamplingMixture {
    struct Component {
        double fraction;
        double sigma;
    };
    std::vector<Component> components;

    static SamplingMixture defaults() {
        return {{{0.01, 0.08}, {0.49, 0.02}, {0.50, 0.003}}};
    }

    void validate() const {
        if (components.empty()) throw std::invalid_argument("mixture: no components");
        double sum = 0.0;
        for (const auto& c : components) {
            if (!(c.sigma > 0.0)) throw std::invalid_argument("mixture: sigma must be > 0");
            if (c.fraction < 0.0) throw std::invalid_argument("mixture: negative fraction");
            sum += c.fraction;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("mixture: fractions must sum to 1");
    }

    // Exact per-component counts via largest remainder, so fractions hold
    // exactly at any n (5000 -> 50/2450/2500 with the defaults).
    std::vector<std::size_t> counts(std::size_t n) const {
        std::vector<std::size_t> out(components.size());
        std::vector<std::pair<double, std::size_t>> remainders;
        std::size_t assigned = 0;
        for (std::size_t i = 0; i < components.size(); ++i) {
            double exact = components[i].fraction * static_cast<double>(n);
            out[i] = static_cast<std::size_t>(exact);
            assigned += out[i];
            remainders.push_back({exact - static_cast<double>(out[i]), i});
        }
        std::stable_sort(remainders.begin(), remainders.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (std::size_t k = 0; assigned < n; ++k, ++assigned) out[remainders[k % remainders.size()].second]++;
        return out;
    }
};

// One training query point: position, raw and clamped ground-truth distance,
// and the unit ground-truth direction away from the surface.
struct TrainingSample {
    Vec3 p;
    double udf_raw = 0.0;
    double udf_clamped = 0.0;
    Vec3 dir;
};

struct TrainingSet {
    std::vector<TrainingSample> samples;
    double delta = 0.2;
    std::string mesh_id;
    std::uint64_t seed = 0;
};

struct GenerateOptions {
    // Points closer to the surface than this are redrawn (their direction is
    // undefined). Set negative in test harnesses to keep everything.
    double min_distance = kDirectionEpsilon;
    int max_attempts = 100;
    int threads = 0;
};

// Draws n surface points (area-weighted), displaces each with axis-wise
// Gaussian noise whose sigma comes from its mixture component, and attaches
// exact oracle distance + direction. Slot i uses substream (seed, i), so the
// result is independent of the parallel schedule.
inline TrainingSet generate_training_set(const SpatialIndex& index, const TriangleMesh& mesh,
                                         std::size_t n, const SamplingMixture& mixture,
                                         double delta, std::uint64_t seed,
                                         const GenerateOptions& opts = {}) {
    if (n < 1) throw std::invalid_argument("generate_training_set: n must be >= 1");
    if (!(delta > 0.0)) throw std::invalid_argument("generate_training_set: delta must be > 0");
    mixture.validate();

    AreaTable table(mesh);
    if (!(table.total_area() > 0.0))
        throw std::invalid_argument("generate_training_set: zero-area mesh");

    // Slot -> component sigma, assigned contiguously by exact counts.
    std::vector<std::size_t> counts = mixture.counts(n);
    std::vector<double> slot_sigma(n);
    std::size_t at = 0;
    for (std::size_t c = 0; c < counts.size(); ++c)
        for (std::size_t k = 0; k < counts[c]; ++k) slot_sigma[at++] = mixture.components[c].sigma;

    TrainingSet set;
    set.samples.resize(n);
    set.delta = delta;
    set.seed = seed;

    std::vector<std::string> failures(1 + (n - 1) / 1024);
    parallel_blocks(
        n, 1024,
        [&](std::size_t block, std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i) {
                Rng rng(seed, i);
                bool done = false;
                for (int attempt = 0; attempt < opts.max_attempts && !done; ++attempt) {
                    int t = table.pick(rng.uniform());
                    Vec3 s = sample_point_in_triangle(mesh, t, rng);
                    Vec3 p = s + rng.normal_vec3(slot_sigma[i]);
                    ClosestHit hit = index.closest_point(p);
                    if (hit.distance <= opts.min_distance) continue;
                    TrainingSample& out = set.samples[i];
                    out.p = p;
                    out.udf_raw = hit.distance;
                    out.udf_clamped = std::min(hit.distance, delta);
                    // With min_distance disabled a draw may sit exactly on the
                    // surface; its direction is left zero.
                    out.dir = hit.distance > 0.0 ? (p - hit.q) / hit.distance : Vec3{};
                    done = true;
                }
                if (!done)
                    failures[block] = "generate_training_set: slot " + std::to_string(i) +
                                      " still within min_distance after " +
                                      std::to_string(opts.max_attempts) + " attempts";
            }
        },
        opts.threads);
    for (const auto& f : failures)
        if (!f.empty()) throw NumericError(f);
    return set;
}

// --- binary training-set file -------------------------------------------
// magic, version, count, delta, seed, mesh_id; then fixed-width LE records
// (p, udf_raw, udf_clamped, dir) as 8 doubles each.

inline constexpr char kTrainingSetMagic[8] = {'A', 'U', 'D', 'F', 'S', 'E', 'T', '\0'};
inline constexpr std::uint32_t kTrainingSetVersion = 1;

inline void save_training_set(const TrainingSet& set, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open training-set file for writing: " + path);
    os.write(kTrainingSetMagic, 8);
    write_u32_le(os, kTrainingSetVersion);
    write_u64_le(os, set.samples.size());
    write_f64_le(os, set.delta);
    write_u64_le(os, set.seed);
    write_u32_le(os, static_cast<std::uint32_t>(set.mesh_id.size()));
    os.write(set.mesh_id.data(), static_cast<std::streamsize>(set.mesh_id.size()));
    for (const auto& s : set.samples) {
        write_f64_le(os, s.p.x); write_f64_le(os, s.p.y); write_f64_le(os, s.p.z);
        write_f64_le(os, s.udf_raw);
        write_f64_le(os, s.udf_clamped);
        write_f64_le(os, s.dir.x); write_f64_le(os, s.dir.y); write_f64_le(os, s.dir.z);
    }
    if (!os) throw DataError("failed writing training-set file: " + path);
}

inline TrainingSet load_training_set(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open training-set file: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kTrainingSetMagic, 8) != 0)
        throw DataError("not a training-set file: " + path);
    std::uint32_t version = read_u32_le(is);
    if (version != kTrainingSetVersion)
        throw DataError("unsupported training-set version " + std::to_string(version));
    TrainingSet set;
    std::uint64_t count = read_u64_le(is);
    set.delta = read_f64_le(is);
    set.seed = read_u64_le(is);
    std::uint32_t id_len = read_u32_le(is);
    set.mesh_id.resize(id_len);
    is.read(set.mesh_id.data(), id_len);
    if (!is) throw DataError("truncated training-set file: " + path);
    set.samples.resize(count);
    for (auto& s : set.samples) {
        s.p.x = read_f64_le(is); s.p.y = read_f64_le(is); s.p.z = read_f64_le(is);
        s.udf_raw = read_f64_le(is);
        s.udf_clamped = read_f64_le(is);
        s.dir.x = read_f64_le(is); s.dir.y = read_f64_le(is); s.dir.z = read_f64_le(is);
    }
    return set;
}

// Seeded epoch permutations partitioned into batches; the last partial batch
// is emitted. Epoch e shuffles with substream (seed, e).
class BatchIterator {
  public:
    BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed)
        : n_(n), batch_size_(batch_size), seed_(seed) {
        if (batch_size < 1) throw std::invalid_argument("BatchIterator: batch_size must be >= 1");
    }

    std::vector<std::vector<std::size_t>> epoch(std::size_t epoch_index) const {
        std::vector<std::size_t> perm(n_);
        std::iota(perm.begin(), perm.end(), 0);
        Rng rng(seed_, epoch_index);
        for (std::size_t i = n_; i > 1; --i) {
            std::size_t j = rng.below(i);
            std::swap(perm[i - 1], perm[j]);
        }
        std::vector<std::vector<std::size_t>> batches;
        for (std::size_t at = 0; at < n_; at += batch_size_) {
            std::size_t end = std::min(n_, at + batch_size_);
            batches.emplace_back(perm.begin() + at, perm.begin() + end);
        }
        return batches;
    }

  private:
    std::size_t n_;
    std::size_t batch_size_;
    std::uint64_t seed_;
};

}  // namespace audf
