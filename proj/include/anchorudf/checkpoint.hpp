#pragma once

#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "anchorudf/anchors.hpp"
#include "anchorudf/common.hpp"
#include "anchorudf/model.hpp"
#include "anchorudf/optimizer.hpp"
#include "anchorudf/sampling.hpp"
#include "anchorudf/tensor.hpp"

namespace audf {

struct TrainConfig {
    static constexpr std::size_t kAuto = std::numeric_limits<std::size_t>::max();

    double lr = 5e-5;
    std::size_t point_batch = 512;
    std::size_t shapes_per_step = 4;
    std::size_t epochs = 80;
    std::size_t lr_decay_epoch = kAuto;  // kAuto -> epochs - 20 (clamped)
    double lr_decay_factor = 0.1;
    double lambda1 = 1.0;
    double lambda2 = 0.02;
    std::size_t gda_start_epoch = kAuto;  // kAuto -> epochs - 10 (clamped)
    double gda_fd_step = 1e-3;
    double gda_max_distance = -1.0;  // < 0 -> model delta
    bool freeze_encoders_during_gda = true;
    std::uint64_t seed = 42;
    int threads = 0;

    std::size_t resolved_lr_decay_epoch() const {
        if (lr_decay_epoch != kAuto) return lr_decay_epoch;
        return epochs > 20 ? epochs - 20 : epochs;
    }
    std::size_t resolved_gda_start() const {
        if (gda_start_epoch != kAuto) return gda_start_epoch;
        return epochs > 10 ? epochs - 10 : 0;
    }
    double resolved_gda_band(double delta) const {
        return gda_max_distance < 0.0 ? delta : gda_max_distance;
    }

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
        if (lambda1 < 0.0 || lambda2 < 0.0)
            throw std::invalid_argument("TrainConfig: lambdas must be >= 0");
        if (point_batch < 1) throw std::invalid_argument("TrainConfig: point_batch must be >= 1");
        if (shapes_per_step < 1)
            throw std::invalid_argument("TrainConfig: shapes_per_step must be >= 1");
    }
};

struct EpochStats {
    double loss_udf_mean = 0.0;  // per-point mean of the summed loss
    double loss_ap = 0.0;
    double loss_gda_mean = 0.0;
    double mean_cos = 0.0;
};

// One trained (or in-training) shape: provenance, learnable conditioning
// and the k-means anchor targets.
struct ShapeEntry {
    std::string mesh_id;
    Tensor conditioning;
    AnchorSet anchor_targets;
};

struct Checkpoint {
    ModelConfig model;
    TrainConfig train;
    std::uint64_t seed = 42;
    std::size_t epochs_completed = 0;
    std::vector<EpochStats> history;
    ModelParams params;
    std::vector<ShapeEntry> shapes;
    // (name, running average) pairs in name order.
    std::vector<std::pair<std::string, std::vector<double>>> optimizer_state;
};

namespace detail {

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
    nlohmann::json j;
    j["k_anchors"] = m.k_anchors;
    j["grid_res"] = m.grid_res;
    j["conv_channels"] = m.conv_channels;
    j["conv_kernel"] = m.conv_kernel;
    j["conditioning"] = to_string(m.conditioning);
    j["latent_dim"] = m.latent_dim;
    j["image_size"] = m.image_size;
    j["image_channels"] = m.image_channels;
    j["decoder_layers"] = m.decoder_layers;
    j["decoder_hidden"] = m.decoder_hidden;
    j["decoder_skip_layer"] = m.decoder_skip_layer;
    j["anchor_hidden"] = m.anchor_hidden;
    j["delta"] = m.delta;
    j["use_predicted_anchors_in_training"] = m.use_predicted_anchors_in_training;
    j["projection_drop_axis"] = m.projection.drop_axis;
    j["projection_scale"] = m.projection.scale;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig m;
    m.k_anchors = j.at("k_anchors").get<std::size_t>();
    m.grid_res = j.at("grid_res").get<std::size_t>();
    m.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    m.conv_kernel = j.at("conv_kernel").get<std::size_t>();
    m.conditioning = conditioning_mode_from_string(j.at("conditioning").get<std::string>());
    m.latent_dim = j.at("latent_dim").get<std::size_t>();
    m.image_size = j.at("image_size").get<std::size_t>();
    m.image_channels = j.at("image_channels").get<std::size_t>();
    m.decoder_layers = j.at("decoder_layers").get<std::size_t>();
    m.decoder_hidden = j.at("decoder_hidden").get<std::size_t>();
    m.decoder_skip_layer = j.at("decoder_skip_layer").get<std::size_t>();
    m.anchor_hidden = j.at("anchor_hidden").get<std::size_t>();
    m.delta = j.at("delta").get<double>();
    m.use_predicted_anchors_in_training = j.at("use_predicted_anchors_in_training").get<bool>();
    m.projection.drop_axis = j.at("projection_drop_axis").get<int>();
    m.projection.scale = j.at("projection_scale").get<double>();
    return m;
}

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
    nlohmann::json j;
    j["lr"] = t.lr;
    j["point_batch"] = t.point_batch;
    j["shapes_per_step"] = t.shapes_per_step;
    j["epochs"] = t.epochs;
    j["lr_decay_epoch"] = t.lr_decay_epoch == TrainConfig::kAuto ? -1
                                                                 : static_cast<long long>(t.lr_decay_epoch);
    j["lr_decay_factor"] = t.lr_decay_factor;
    j["lambda1"] = t.lambda1;
    j["lambda2"] = t.lambda2;
    j["gda_start_epoch"] = t.gda_start_epoch == TrainConfig::kAuto
                               ? -1
                               : static_cast<long long>(t.gda_start_epoch);
    j["gda_fd_step"] = t.gda_fd_step;
    j["gda_max_distance"] = t.gda_max_distance;
    j["freeze_encoders_during_gda"] = t.freeze_encoders_during_gda;
    j["seed"] = t.seed;
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig t;
    t.lr = j.at("lr").get<double>();
    t.point_batch = j.at("point_batch").get<std::size_t>();
    t.shapes_per_step = j.at("shapes_per_step").get<std::size_t>();
    t.epochs = j.at("epochs").get<std::size_t>();
    long long decay = j.at("lr_decay_epoch").get<long long>();
    t.lr_decay_epoch = decay < 0 ? TrainConfig::kAuto : static_cast<std::size_t>(decay);
    t.lr_decay_factor = j.at("lr_decay_factor").get<double>();
    t.lambda1 = j.at("lambda1").get<double>();
    t.lambda2 = j.at("lambda2").get<double>();
    long long gda = j.at("gda_start_epoch").get<long long>();
    t.gda_start_epoch = gda < 0 ? TrainConfig::kAuto : static_cast<std::size_t>(gda);
    t.gda_fd_step = j.at("gda_fd_step").get<double>();
    t.gda_max_distance = j.at("gda_max_distance").get<double>();
    t.freeze_encoders_during_gda = j.at("freeze_encoders_during_gda").get<bool>();
    t.seed = j.at("seed").get<std::uint64_t>();
    return t;
}

inline void write_named_tensor(std::ostream& os, const std::string& name, const double* data,
                               const Tensor::Shape& shape, std::size_t count) {
    write_u32_le(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32_le(os, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) write_u64_le(os, d);
    write_u64_le(os, count);
    for (std::size_t i = 0; i < count; ++i) write_f64_le(os, data[i]);
}

inline std::pair<std::string, Tensor> read_named_tensor(std::istream& is) {
    std::uint32_t name_len = read_u32_le(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw DataError("checkpoint: truncated tensor name");
    std::uint32_t rank = read_u32_le(is);
    Tensor::Shape shape(rank);
    for (auto& d : shape) d = read_u64_le(is);
    std::uint64_t count = read_u64_le(is);
    std::vector<double> values(count);
    for (auto& v : values) v = read_f64_le(is);
    return {name, Tensor::from(std::move(shape), std::move(values))};
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'A', 'U', 'D', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary checkpoint: magic/version header, canonical JSON config block, then
// length-prefixed little-endian f64 arrays per named tensor in a fixed order.
// save -> load -> save reproduces identical bytes.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw DataError("cannot open checkpoint for writing: " + tmp);

        nlohmann::json j;
        j["model"] = detail::model_config_to_json(ckpt.model);
        j["train"] = detail::train_config_to_json(ckpt.train);
        j["seed"] = ckpt.seed;
        j["epochs_completed"] = ckpt.epochs_completed;
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& e : ckpt.history)
            hist.push_back({e.loss_udf_mean, e.loss_ap, e.loss_gda_mean, e.mean_cos});
        j["history"] = hist;
        nlohmann::json shapes = nlohmann::json::array();
        for (const auto& s : ckpt.shapes) shapes.push_back({{"mesh_id", s.mesh_id}});
        j["shapes"] = shapes;
        const std::string blob = j.dump();

        os.write(kCheckpointMagic, 8);
        write_u32_le(os, kCheckpointVersion);
        write_u64_le(os, blob.size());
        os.write(blob.data(), static_cast<std::streamsize>(blob.size()));

        std::vector<std::pair<std::string, const Tensor*>> ordered;
        const_cast<ModelParams&>(ckpt.params).for_each([&](const std::string& name, Tensor& t) {
            ordered.emplace_back(name, &t);
        });
        std::uint64_t total = ordered.size() + 2 * ckpt.shapes.size() +
                              ckpt.optimizer_state.size();
        write_u64_le(os, total);
        for (const auto& [name, t] : ordered)
            detail::write_named_tensor(os, name, t->data(), t->shape(), t->size());
        for (std::size_t i = 0; i < ckpt.shapes.size(); ++i) {
            const ShapeEntry& s = ckpt.shapes[i];
            detail::write_named_tensor(os, "shape" + std::to_string(i) + ".conditioning",
                                       s.conditioning.data(), s.conditioning.shape(),
                                       s.conditioning.size());
            std::vector<double> anchors;
            anchors.reserve(s.anchor_targets.points.size() * 3);
            for (const Vec3& p : s.anchor_targets.points) {
                anchors.push_back(p.x);
                anchors.push_back(p.y);
                anchors.push_back(p.z);
            }
            detail::write_named_tensor(os, "shape" + std::to_string(i) + ".anchor_targets",
                                       anchors.data(), {s.anchor_targets.points.size(), 3},
                                       anchors.size());
        }
        for (const auto& [name, values] : ckpt.optimizer_state)
            detail::write_named_tensor(os, "opt." + name, values.data(), {values.size()},
                                       values.size());
        if (!os) throw DataError("failed writing checkpoint: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("cannot move checkpoint into place: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw DataError("not a checkpoint file: " + path);
    std::uint32_t version = read_u32_le(is);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    std::uint64_t blob_size = read_u64_le(is);
    std::string blob(blob_size, '\0');
    is.read(blob.data(), static_cast<std::streamsize>(blob_size));
    if (!is) throw DataError("checkpoint: truncated JSON block");

    nlohmann::json j = nlohmann::json::parse(blob, nullptr, /*allow_exceptions=*/true);
    Checkpoint ckpt;
    ckpt.model = detail::model_config_from_json(j.at("model"));
    ckpt.train = detail::train_config_from_json(j.at("train"));
    ckpt.seed = j.at("seed").get<std::uint64_t>();
    ckpt.epochs_completed = j.at("epochs_completed").get<std::size_t>();
    for (const auto& e : j.at("history")) {
        EpochStats st;
        st.loss_udf_mean = e.at(0).get<double>();
        st.loss_ap = e.at(1).get<double>();
        st.loss_gda_mean = e.at(2).get<double>();
        st.mean_cos = e.at(3).get<double>();
        ckpt.history.push_back(st);
    }
    ckpt.shapes.resize(j.at("shapes").size());
    for (std::size_t i = 0; i < ckpt.shapes.size(); ++i)
        ckpt.shapes[i].mesh_id = j.at("shapes").at(i).at("mesh_id").get<std::string>();

    std::uint64_t tensor_count = read_u64_le(is);
    ckpt.params = ModelParams::init(ckpt.model, 0);  // shapes overwritten below
    std::vector<std::pair<std::string, Tensor*>> slots;
    ckpt.params.for_each(
        [&](const std::string& name, Tensor& t) { slots.emplace_back(name, &t); });

    for (std::uint64_t i = 0; i < tensor_count; ++i) {
        auto [name, tensor] = detail::read_named_tensor(is);
        bool placed = false;
        for (auto& [pname, pt] : slots) {
            if (pname == name) {
                if (!pt->same_shape(tensor))
                    throw DataError("checkpoint: shape mismatch for " + name);
                *pt = tensor;
                placed = true;
                break;
            }
        }
        if (placed) continue;
        if (name.rfind("shape", 0) == 0) {
            std::size_t dot = name.find('.');
            std::size_t idx = static_cast<std::size_t>(std::stoul(name.substr(5, dot - 5)));
            if (idx >= ckpt.shapes.size()) throw DataError("checkpoint: bad shape index in " + name);
            std::string field = name.substr(dot + 1);
            if (field == "conditioning") {
                ckpt.shapes[idx].conditioning = tensor;
            } else if (field == "anchor_targets") {
                AnchorSet set;
                for (std::size_t a = 0; a + 2 < tensor.size(); a += 3)
                    set.points.push_back({tensor[a], tensor[a + 1], tensor[a + 2]});
                ckpt.shapes[idx].anchor_targets = std::move(set);
            } else {
                throw DataError("checkpoint: unknown shape field " + name);
            }
        } else if (name.rfind("opt.", 0) == 0) {
            ckpt.optimizer_state.emplace_back(
                name.substr(4), std::vector<double>(tensor.data(), tensor.data() + tensor.size()));
        } else {
            throw DataError("checkpoint: unknown tensor " + name);
        }
    }
    return ckpt;
}

}  // namespace audf
