#include "sqs/pretrain/pretrain.hpp"

#include "sqs/core/error.hpp"
#include "sqs/render/render_op.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace sqs::pretrain {

void LossWeights::validate() const {
    if (!(w_rgb >= 0.0) || !(w_depth >= 0.0)) throw ConfigError("loss weights must be non-negative");
}

LossTerms reconstruction_loss(const Array& pred_rgb, const Array& pred_depth, const Array& gt_rgb,
                              const Array& gt_depth, const Array& valid_mask, const LossWeights& w) {
    if (pred_rgb.shape() != gt_rgb.shape() || pred_depth.shape() != gt_depth.shape() ||
        pred_depth.shape() != valid_mask.shape() || pred_rgb.size() != 3 * pred_depth.size())
        throw ShapeError("reconstruction_loss: shapes disagree");
    LossTerms t;
    for (std::size_t i = 0; i < pred_rgb.size(); ++i) t.rgb += std::abs(pred_rgb[i] - gt_rgb[i]);
    t.rgb /= static_cast<double>(pred_rgb.size());
    double n = 0.0;
    for (std::size_t i = 0; i < pred_depth.size(); ++i) {
        if (valid_mask[i] == 0.0) continue;
        t.depth += std::abs(pred_depth[i] - gt_depth[i]);
        n += 1.0;
    }
    t.depth = n > 0.0 ? t.depth / n : 0.0;
    t.total = w.w_rgb * t.rgb + w.w_depth * t.depth;
    return t;
}

LossNodes reconstruction_loss(Graph& g, NodeRef render, NodeRef gt_rgb, NodeRef gt_depth_masked, NodeRef mask,
                              NodeRef depth_norm, const LossWeights& w) {
    Graph::Scope scope(g, "loss");
    const auto& s = g.shape(render);
    if (s.size() != 3 || s[2] != render::kRenderChannels) throw ShapeError("loss expects a [H,W,5] render");
    LossNodes out;
    out.rgb = g.l1(g.slice(render, 0, 3), gt_rgb);
    auto depth = g.reshape(g.slice(render, 3, 4), {s[0], s[1]});
    // |m (d - gt)| = m |d - gt| for a 0/1 mask.
    out.depth = g.multiply(g.l1(g.multiply(depth, mask), gt_depth_masked), depth_norm);
    out.total = g.add(g.scale(out.rgb, w.w_rgb), g.scale(out.depth, w.w_depth));
    return out;
}

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup, double peak) {
    if (total_steps <= warmup) throw InvalidArgument("lr_schedule: total_steps must exceed warmup");
    if (step > total_steps) throw InvalidArgument("lr_schedule: step past total_steps");
    if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    const double t = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void adamw_update(Array& w, const Array& grad, Moments& mom, std::uint64_t step, double lr, const AdamWHyper& h) {
    if (grad.shape() != w.shape()) throw ShapeError("adamw: gradient shape differs from parameter");
    if (mom.m.shape() != w.shape()) mom.m = Array(w.shape());
    if (mom.v.shape() != w.shape()) mom.v = Array(w.shape());
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
    const double decay = 1.0 - lr * h.weight_decay;
    double* wp = w.data();
    double* m = mom.m.data();
    double* v = mom.v.data();
    const double* gp = grad.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
        wp[i] *= decay;
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gp[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gp[i] * gp[i];
        wp[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
    }
}

void adamw_step(Graph& g, OptimizerState& state, double lr) {
    ++state.step;
    for (const auto& name : g.parameter_names(true)) {
        adamw_update(g.mutable_parameter(name), g.parameter_gradient(name), state.moments[name], state.step, lr,
                     state.hyper);
    }
}

geom::Camera mirror_camera(const geom::Camera& cam) {
    geom::Camera out = cam;
    out.extrinsics.col(0) = -cam.extrinsics.col(0);
    out.extrinsics(3, 0) = 0.0;
    out.intrinsics(0, 2) = cam.width - 1 - cam.cx();
    return out;
}

namespace {

Array mirror_width(const Array& a) {
    Array out(a.shape());
    const std::size_t h = a.dim(0), w = a.dim(1);
    const std::size_t c = a.size() / (h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            std::copy_n(a.data() + (y * w + x) * c, c, out.data() + (y * w + (w - 1 - x)) * c);
    return out;
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

scene::SceneSample horizontal_flip_augment(const scene::SceneSample& sample, bool apply) {
    if (!apply) return sample;
    scene::SceneSample out;
    for (std::size_t v = 0; v < sample.views(); ++v) {
        out.rgb.push_back(mirror_width(sample.rgb[v]));
        out.dense_depth.push_back(mirror_width(sample.dense_depth[v]));
        out.valid_mask.push_back(mirror_width(sample.valid_mask[v]));
        out.cameras.push_back(mirror_camera(sample.cameras[v]));
    }
    return out;
}

void PretrainConfig::validate() const {
    decoder.validate();
    loss.validate();
    if (!(lr_peak >= 0.0) || !std::isfinite(lr_peak)) throw ConfigError("opt.lr_peak must be a finite non-negative number");
    if (!(weight_decay >= 0.0)) throw ConfigError("opt.weight_decay must be non-negative");
    if (steps <= warmup_steps) throw ConfigError("train.steps must exceed opt.warmup_steps");
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("aug.hflip_prob must lie in [0,1]");
}

PretrainModel::PretrainModel(const PretrainConfig& config, const scene::Bounds& bounds, std::size_t views,
                             int width, int height, bool with_loss)
    : graph_(std::make_unique<Graph>()), bounds_(bounds), views_(views), width_(width), height_(height),
      with_loss_(with_loss) {
    config.decoder.validate();
    bounds.validate();
    if (views == 0) throw InvalidArgument("pretrain model needs at least one view");
    Graph& g = *graph_;
    const auto V = views, H = static_cast<std::size_t>(height), W = static_cast<std::size_t>(width);
    auto images = g.input("images", {V, H, W, 3});
    auto cameras = g.input("cameras", {V, geom::kCameraRowSize});
    model::Rng rng(config.seed);
    const auto pyramid = model::encode(g, images, config.encoder, rng);
    const auto init = model::init_queries(config.decoder.K, bounds, config.seed, config.decoder);
    decoder_ = model::build_decoder(g, pyramid, cameras, init, config.decoder, rng);
    for (std::size_t v = 0; v < V; ++v) {
        auto cam = g.reshape(g.gather(cameras, {static_cast<std::int64_t>(v)}, {1}), {geom::kCameraRowSize});
        renders_.push_back(render::add_render_node(g, decoder_.head.gaussians, cam, width, height, config.render));
    }
    if (!with_loss) return;
    NodeRef total;
    for (std::size_t v = 0; v < V; ++v) {
        const auto id = std::to_string(v);
        auto l = reconstruction_loss(g, renders_[v], g.input("gt_rgb" + id, {H, W, 3}),
                                     g.input("gt_depth" + id, {H, W}), g.input("mask" + id, {H, W}),
                                     g.input("depth_norm" + id, {}), config.loss);
        view_losses_.push_back(l);
        total = total.valid() ? g.add(total, l.total) : l.total;
    }
    loss_.total = g.scale(total, 1.0 / static_cast<double>(V));
}

std::map<std::string, Array> PretrainModel::inputs(const scene::SceneSample& sample) const {
    if (sample.views() != views_) throw InvalidArgument("sample has " + std::to_string(sample.views()) +
                                                        " views, model expects " + std::to_string(views_));
    const auto H = static_cast<std::size_t>(height_), W = static_cast<std::size_t>(width_);
    std::map<std::string, Array> in;
    Array images({views_, H, W, 3});
    Array cams({views_, geom::kCameraRowSize});
    for (std::size_t v = 0; v < views_; ++v) {
        const auto& cam = sample.cameras[v];
        if (cam.width != width_ || cam.height != height_ || sample.rgb[v].shape() != ad::Shape{H, W, 3})
            throw InvalidArgument("view " + std::to_string(v) + " does not match the model image size");
        std::copy_n(sample.rgb[v].data(), H * W * 3, images.data() + v * H * W * 3);
        const auto row = geom::camera_to_row(cam);
        std::copy(row.begin(), row.end(), cams.data() + v * geom::kCameraRowSize);
        if (!with_loss_) continue;
        const auto id = std::to_string(v);
        const Array& mask = sample.valid_mask[v];
        Array masked(ad::Shape{H, W});
        double n = 0.0;
        for (std::size_t i = 0; i < H * W; ++i) {
            masked[i] = mask[i] * sample.dense_depth[v][i];
            n += mask[i];
        }
        in["gt_rgb" + id] = sample.rgb[v];
        in["gt_depth" + id] = std::move(masked);
        in["mask" + id] = mask;
        in["depth_norm" + id] = Array::scalar(n > 0.0 ? static_cast<double>(H * W) / n : 0.0);
    }
    in["images"] = std::move(images);
    in["cameras"] = std::move(cams);
    return in;
}

double PretrainModel::forward(const scene::SceneSample& sample) {
    graph_->evaluate(inputs(sample));
    return with_loss_ ? graph_->value(loss_.total).item() : 0.0;
}

std::vector<geom::GaussianPrimitive> PretrainModel::gaussians() const {
    return model::read_gaussians(*graph_, decoder_.head.gaussians);
}

double PretrainModel::depth_mae() const {
    double s = 0.0;
    for (const auto& l : view_losses_) s += graph_->value(l.depth).item();
    return view_losses_.empty() ? 0.0 : s / static_cast<double>(view_losses_.size());
}

double PretrainModel::rgb_l1() const {
    double s = 0.0;
    for (const auto& l : view_losses_) s += graph_->value(l.rgb).item();
    return view_losses_.empty() ? 0.0 : s / static_cast<double>(view_losses_.size());
}

void PretrainModel::load_parameters(const ad::NamedArrays& records) {
    ad::NamedArrays own;
    for (const auto& [name, value] : records)
        if (graph_->has_parameter(name)) own.emplace_back(name, value);
    if (own.size() != graph_->parameter_names().size())
        throw FormatError("checkpoint holds " + std::to_string(own.size()) + " of " +
                          std::to_string(graph_->parameter_names().size()) + " model parameters");
    graph_->load_parameters(own);
}

double step_uniform(std::uint64_t seed, std::uint64_t step) {
    return static_cast<double>(splitmix(splitmix(seed) ^ step) >> 11) * 0x1.0p-53;
}

std::string moment_record(const std::string& param, char which) {
    return std::string("optimizer.") + which + "." + param;
}

Pretrainer::Pretrainer(PretrainConfig config, std::vector<scene::SceneSample> samples, const scene::Bounds& bounds)
    : config_(std::move(config)), samples_(std::move(samples)) {
    config_.validate();
    if (samples_.empty()) throw InvalidArgument("pretraining needs at least one sample");
    const auto& first = samples_.front();
    if (first.views() == 0) throw InvalidArgument("sample without views");
    for (const auto& s : samples_) {
        if (s.views() != first.views()) throw InvalidArgument("samples disagree on the number of views");
    }
    model_ = std::make_unique<PretrainModel>(config_, bounds, first.views(), first.cameras[0].width,
                                             first.cameras[0].height);
    state_.hyper.weight_decay = config_.weight_decay;
}

StepRecord Pretrainer::step() {
    if (done()) throw InvalidArgument("training already ran all " + std::to_string(config_.steps) + " steps");
    StepRecord r;
    r.step = current_step() + 1;
    r.flipped = step_uniform(config_.seed, r.step) < config_.hflip_prob;
    const auto& base = samples_[(r.step - 1) % samples_.size()];
    try {
        r.loss = model_->forward(horizontal_flip_augment(base, r.flipped));
    } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at step " + std::to_string(r.step) + "\n" + diagnostics());
    }
    if (!std::isfinite(r.loss))
        throw NumericError("non-finite loss at step " + std::to_string(r.step) + "\n" + diagnostics());
    Graph& g = model_->graph();
    g.backpropagate(model_->loss());
    grad_norms_.clear();
    bool finite = true;
    for (const auto& name : g.parameter_names(true)) {
        double s = 0.0;
        for (double v : g.parameter_gradient(name).values()) s += v * v;
        grad_norms_.emplace_back(name, std::sqrt(s));
        finite = finite && std::isfinite(s);
    }
    r.lr = lr_schedule(r.step, config_.steps, config_.warmup_steps, config_.lr_peak);
    last_lr_ = r.lr;
    if (!finite) throw NumericError("non-finite gradient at step " + std::to_string(r.step) + "\n" + diagnostics());
    adamw_step(g, state_, r.lr);
    return r;
}

ad::NamedArrays Pretrainer::state() const {
    auto records = model_->parameters();
    records.emplace_back(kOptStepRecord, Array::scalar(static_cast<double>(state_.step)));
    for (const auto& name : model_->graph().parameter_names(true)) {
        const auto it = state_.moments.find(name);
        const Array& p = model_->graph().parameter_value(name);
        records.emplace_back(moment_record(name, 'm'), it == state_.moments.end() ? Array(p.shape()) : it->second.m);
        records.emplace_back(moment_record(name, 'v'), it == state_.moments.end() ? Array(p.shape()) : it->second.v);
    }
    return records;
}

void Pretrainer::restore(const ad::NamedArrays& records) {
    model_->load_parameters(records);
    const double step = ad::find_record(records, kOptStepRecord).item();
    if (!(step >= 0.0) || step != std::floor(step)) throw FormatError("optimizer.step is not a count");
    state_.step = static_cast<std::uint64_t>(step);
    state_.moments.clear();
    for (const auto& name : model_->graph().parameter_names(true)) {
        Moments m{ad::find_record(records, moment_record(name, 'm')), ad::find_record(records, moment_record(name, 'v'))};
        const auto& shape = model_->graph().parameter_value(name).shape();
        if (m.m.shape() != shape || m.v.shape() != shape)
            throw FormatError("optimizer moments for '" + name + "' do not match the parameter shape");
        state_.moments[name] = std::move(m);
    }
}

std::string Pretrainer::diagnostics() const {
    std::ostringstream os;
    os.precision(17);
    os << "last lr " << last_lr_ << "\n";
    for (const auto& [name, norm] : grad_norms_) os << "grad_norm " << name << " " << norm << "\n";
    return os.str();
}

} // namespace sqs::pretrain
