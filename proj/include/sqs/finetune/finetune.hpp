#pragma once

#include "sqs/pretrain/pretrain.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace sqs::finetune {

using ad::Array;
using ad::Graph;
using ad::NodeRef;
using model::Rng;

// Decoded anchor vector per pretrained query: position and scale relative
// to the bounds, quaternion, opacity, color.
inline constexpr std::size_t kAnchorCode = 14;

struct InteractionConfig {
    std::size_t k = 8;
    double alpha_thresh = 0.05;
    std::size_t pos_hidden = 64;     // perceptron widths for MLP(mu_t) and MLP(g_k)
    std::size_t anchor_hidden = 64;
    void validate() const;
};

struct FinetuneConfig {
    InteractionConfig interaction;
    bool use_interaction = true;
    std::size_t grid = 16;
    std::size_t task_dim = 64;
    std::size_t head_hidden = 64;
    double lr_peak = 1e-3;
    std::size_t warmup_steps = 50;
    double weight_decay = 0.01;
    std::size_t steps = 500;
    std::uint64_t seed = 0;
    double train_fraction = 1.0;
    void validate() const;
};

struct TaskQuerySet {
    Array positions;  // [M,3] metres
    Array features;   // [M,D_t]
};

// Pretrained queries after opacity filtering. anchors [N,14], features [N,D].
struct FilteredQueries {
    Array anchors;
    Array features;
    std::vector<std::size_t> kept;  // indices into the unfiltered set
    bool empty() const { return kept.empty(); }
};

// Encodes primitives as [K,14] rows relative to bounds.
Array encode_anchors(const std::vector<geom::GaussianPrimitive>& gaussians, const scene::Bounds& bounds);

// Keeps rows whose opacity >= alpha_thresh, in order.
FilteredQueries filter_by_opacity(const std::vector<geom::GaussianPrimitive>& gaussians, const Array& features,
                                  const scene::Bounds& bounds, double alpha_thresh);

// [M,k] nearest anchor indices, ties by ascending index; with fewer than k
// anchors the nearest fills the remaining columns.
std::vector<std::int64_t> knn_neighbors(const Array& task_positions, const Array& anchor_positions, std::size_t k);

// Voxel centres of a G^3 grid over bounds, x fastest.
Array grid_centres(const scene::Bounds& bounds, std::size_t grid);

// 1 where a Gaussian with opacity > 0.5 has its mean in the voxel.
std::vector<int> occupancy_labels(const scene::Scene& scene, std::size_t grid);

struct IoU {
    std::vector<double> per_class;        // NaN for classes absent from both
    double mean = 0.0;
};
IoU evaluate_iou(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t classes = 2);

// Graph pieces. Inputs: task features [M,D_t], task positions [M,3]
// (normalised), pretrained anchors [N,14] and features [N,D], knn [M,k],
// gate [] (0 turns the block into the identity). Parameters under <name>.
NodeRef local_query_interaction(Graph& g, NodeRef task_features, NodeRef task_positions, NodeRef anchors,
                                NodeRef anchor_features, NodeRef knn, NodeRef gate, const InteractionConfig& cfg,
                                const std::string& name, Rng& rng);

// [M,D_t] -> [M,classes] through a 2-layer perceptron.
NodeRef occupancy_head(Graph& g, NodeRef features, std::size_t hidden, std::size_t classes, const std::string& name,
                       Rng& rng);

// Output of the frozen pretrained model for one scene sample.
struct PretrainedInference {
    std::vector<geom::GaussianPrimitive> gaussians;
    Array features;  // [K,D]
};

// Pretrained encoder + decoder, frozen. Parameters never change after load.
class FrozenPretrained {
public:
    FrozenPretrained(const pretrain::PretrainConfig& config, const scene::Bounds& bounds, std::size_t views,
                     int width, int height, const ad::NamedArrays& checkpoint);
    PretrainedInference infer(const scene::SceneSample& sample);
    ad::NamedArrays parameters() const { return model_.parameters(); }
    std::size_t queries() const;
    std::size_t feature_dim() const;

private:
    pretrain::PretrainModel model_;
};

// One fine-tuning scene with its cached frozen inference. knn indexes the
// unfiltered rows of anchors/features; gate is 0 when nothing passed the
// opacity filter.
struct TaskExample {
    scene::SceneSample sample;
    std::vector<int> labels;  // [G^3]
    Array anchors;            // [K,14]
    Array features;           // [K,D]
    std::vector<std::int64_t> knn;
    std::size_t kept = 0;
    bool gate = false;
};

// Task encoder (initialised from the pretrained encoder), task queries at
// voxel centres, optional query interaction, occupancy head.
class TaskModel {
public:
    TaskModel(const FinetuneConfig& config, const model::EncoderConfig& encoder, const scene::Bounds& bounds,
              std::size_t views, int width, int height, std::size_t pretrained_queries, std::size_t pretrained_dim,
              const ad::NamedArrays* encoder_init);

    Graph& graph() { return *graph_; }
    const Graph& graph() const { return *graph_; }
    std::map<std::string, Array> inputs(const TaskExample& ex) const;
    double forward(const TaskExample& ex);
    std::vector<int> predictions() const;
    NodeRef loss() const { return loss_; }
    NodeRef logits() const { return logits_; }
    std::size_t queries() const { return m_; }

private:
    std::unique_ptr<Graph> graph_;
    FinetuneConfig config_;
    scene::Bounds bounds_;
    std::size_t views_, m_;
    int width_, height_;
    Array positions_;
    NodeRef logits_, loss_;
};

struct FinetuneRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double iou_occupied = 0.0;
    double miou = 0.0;
};

// Number of training scenes used for a fraction f of n: ceil(f * n), at least 1.
std::size_t train_count(std::size_t n, double fraction);

class Finetuner {
public:
    Finetuner(FinetuneConfig config, const pretrain::PretrainConfig& pretrained_config,
              const ad::NamedArrays& checkpoint, const std::vector<scene::SceneRecord>& train,
              const scene::Bounds& bounds);

    FinetuneRecord step();
    bool done() const { return state_.step >= config_.steps; }
    std::size_t current_step() const { return static_cast<std::size_t>(state_.step); }

    // IoU over the given scenes, pooled voxel counts.
    IoU evaluate(const std::vector<scene::SceneRecord>& scenes);

    TaskModel& task() { return *task_; }
    FrozenPretrained& frozen() { return *frozen_; }
    const std::vector<TaskExample>& examples() const { return examples_; }
    ad::NamedArrays task_parameters() const { return task_->graph().named_parameters(); }
    // Replaces every task parameter; FormatError when the sets differ.
    void load_task_parameters(const ad::NamedArrays& records);

private:
    TaskExample make_example(const scene::SceneRecord& rec);

    FinetuneConfig config_;
    scene::Bounds bounds_;
    std::unique_ptr<FrozenPretrained> frozen_;
    std::unique_ptr<TaskModel> task_;
    std::vector<TaskExample> examples_;
    pretrain::OptimizerState state_;
};

} // namespace sqs::finetune
