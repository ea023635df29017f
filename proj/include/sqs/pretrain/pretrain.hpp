#pragma once

#include "sqs/autodiff/checkpoint.hpp"
#include "sqs/autodiff/graph.hpp"
#include "sqs/model/decoder.hpp"
#include "sqs/model/encoder.hpp"
#include "sqs/render/rasterizer.hpp"
#include "sqs/scene/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace sqs::pretrain {

using ad::Array;
using ad::Graph;
using ad::NodeRef;

struct LossWeights {
    double w_rgb = 1.0;
    double w_depth = 0.05;
    void validate() const;
};

struct LossTerms {
    double rgb = 0.0;    // mean |pred - gt| over all pixels and channels
    double depth = 0.0;  // mean |pred - gt| over valid pixels, 0 without any
    double total = 0.0;
};

// pred_rgb/gt_rgb [H,W,3], depths and mask [H,W].
LossTerms reconstruction_loss(const Array& pred_rgb, const Array& pred_depth, const Array& gt_rgb,
                              const Array& gt_depth, const Array& valid_mask, const LossWeights& w = {});

// Graph form over a render output [H,W,5]. gt_depth_masked holds
// gt_depth * mask and depth_norm holds H*W / valid_count (0 without any).
struct LossNodes {
    NodeRef rgb, depth, total;
};
LossNodes reconstruction_loss(Graph& g, NodeRef render, NodeRef gt_rgb, NodeRef gt_depth_masked, NodeRef mask,
                              NodeRef depth_norm, const LossWeights& w);

// Linear warmup to peak, then cosine decay to 0 at total_steps.
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup = 500, double peak = 2e-4);

struct AdamWHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct Moments {
    Array m;
    Array v;
};

struct OptimizerState {
    AdamWHyper hyper;
    std::uint64_t step = 0;
    std::map<std::string, Moments> moments;
};

// One decoupled-decay update; `step` is the 1-based count including this one.
void adamw_update(Array& w, const Array& grad, Moments& mom, std::uint64_t step, double lr, const AdamWHyper& h);

// Updates every trainable parameter of g from its current gradient.
void adamw_step(Graph& g, OptimizerState& state, double lr);

// Mirror about the vertical image axis: T' = T diag(-1,1,1,1), cx' = W-1-cx.
geom::Camera mirror_camera(const geom::Camera& cam);
scene::SceneSample horizontal_flip_augment(const scene::SceneSample& sample, bool apply);

struct PretrainConfig {
    model::EncoderConfig encoder;
    model::DecoderConfig decoder;
    LossWeights loss;
    render::RenderSettings render;
    double lr_peak = 2e-4;
    std::size_t warmup_steps = 500;
    double weight_decay = 0.01;
    std::size_t steps = 2000;
    std::uint64_t seed = 0;
    double hflip_prob = 0.5;
    void validate() const;
};

// Encoder, query decoder and per-view renders in one graph. Inputs are
// "images" [V,H,W,3] and "cameras" [V,20]; with supervision also
// "gt_rgb<v>", "gt_depth<v>" (masked), "mask<v>" and "depth_norm<v>".
class PretrainModel {
public:
    PretrainModel(const PretrainConfig& config, const scene::Bounds& bounds, std::size_t views, int width,
                  int height, bool with_loss = true);

    Graph& graph() { return *graph_; }
    const Graph& graph() const { return *graph_; }

    std::map<std::string, Array> inputs(const scene::SceneSample& sample) const;
    // Evaluates the graph; returns the loss (0 without supervision).
    double forward(const scene::SceneSample& sample);

    NodeRef loss() const { return loss_.total; }
    NodeRef render(std::size_t view) const { return renders_.at(view); }
    const model::DecoderGraph& decoder() const { return decoder_; }
    std::vector<geom::GaussianPrimitive> gaussians() const;
    // Mean over views of the masked depth error of the last forward.
    double depth_mae() const;
    double rgb_l1() const;

    std::size_t views() const { return views_; }
    int width() const { return width_; }
    int height() const { return height_; }
    const scene::Bounds& bounds() const { return bounds_; }

    ad::NamedArrays parameters() const { return graph_->named_parameters(); }
    void load_parameters(const ad::NamedArrays& records);

private:
    std::unique_ptr<Graph> graph_;
    scene::Bounds bounds_;
    std::size_t views_;
    int width_, height_;
    bool with_loss_;
    model::DecoderGraph decoder_;
    std::vector<NodeRef> renders_;
    std::vector<LossNodes> view_losses_;
    LossNodes loss_;
};

struct StepRecord {
    std::size_t step = 0;  // 1-based
    double loss = 0.0;
    double lr = 0.0;
    bool flipped = false;
};

// Deterministic uniform in [0,1) from (seed, step).
double step_uniform(std::uint64_t seed, std::uint64_t step);

// Single-process trainer over baked samples sharing one bounds box. Step s
// uses sample (s-1) mod n, flips it when step_uniform(seed, s) < hflip_prob,
// and updates with lr_schedule(s, steps).
class Pretrainer {
public:
    Pretrainer(PretrainConfig config, std::vector<scene::SceneSample> samples, const scene::Bounds& bounds);

    StepRecord step();
    std::size_t current_step() const { return static_cast<std::size_t>(state_.step); }
    bool done() const { return current_step() >= config_.steps; }

    PretrainModel& model() { return *model_; }
    const PretrainConfig& config() const { return config_; }
    const OptimizerState& optimizer() const { return state_; }

    // Parameters plus optimizer moments and step; restoring continues
    // bit-identically.
    ad::NamedArrays state() const;
    void restore(const ad::NamedArrays& records);
    void save(const std::filesystem::path& path) const { ad::save_checkpoint(path, state()); }
    void load(const std::filesystem::path& path) { restore(ad::load_checkpoint(path)); }

    // Per-parameter gradient norms of the last backward, plus the last lr.
    std::string diagnostics() const;

private:
    PretrainConfig config_;
    std::vector<scene::SceneSample> samples_;
    std::unique_ptr<PretrainModel> model_;
    OptimizerState state_;
    double last_lr_ = 0.0;
    std::vector<std::pair<std::string, double>> grad_norms_;
};

// Checkpoint record names for optimizer state.
inline constexpr const char* kOptStepRecord = "optimizer.step";
std::string moment_record(const std::string& param, char which);  // which = 'm' or 'v'

} // namespace sqs::pretrain
