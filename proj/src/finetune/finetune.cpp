#include "sqs/finetune/finetune.hpp"

#include "sqs/core/error.hpp"
#include "sqs/core/parallel.hpp"
#include "sqs/model/layers.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

namespace sqs::finetune {

void InteractionConfig::validate() const {
    if (k < 1) throw ConfigError("interaction.k must be at least 1");
    if (!(alpha_thresh >= 0.0 && alpha_thresh <= 1.0)) throw ConfigError("interaction.alpha_thresh must lie in [0,1]");
    if (pos_hidden == 0 || anchor_hidden == 0) throw ConfigError("interaction perceptron widths must be positive");
}

void FinetuneConfig::validate() const {
    interaction.validate();
    if (grid < 1) throw ConfigError("finetune.grid must be at least 1");
    if (task_dim == 0 || head_hidden == 0) throw ConfigError("finetune widths must be positive");
    if (!(lr_peak >= 0.0) || !std::isfinite(lr_peak)) throw ConfigError("finetune.lr_peak must be finite and non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("finetune.weight_decay must be non-negative");
    if (steps <= warmup_steps) throw ConfigError("finetune.steps must exceed finetune.warmup_steps");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("finetune.train_fraction must lie in (0,1]");
}

Array encode_anchors(const std::vector<geom::GaussianPrimitive>& gaussians, const scene::Bounds& bounds) {
    Array out({gaussians.size(), kAnchorCode});
    const geom::Vec3 c = bounds.center();
    const double half = 0.5 * bounds.extent();
    for (std::size_t k = 0; k < gaussians.size(); ++k) {
        const auto& p = gaussians[k];
        double* row = out.data() + k * kAnchorCode;
        for (int i = 0; i < 3; ++i) {
            row[i] = (p.mu[i] - c[i]) / half;
            row[3 + i] = 0.5 * (std::log(std::max(p.scale[i], 1e-12) / bounds.extent()) + 4.0);
        }
        for (int i = 0; i < 4; ++i) row[6 + i] = p.quat[i];
        row[10] = p.opacity;
        for (int i = 0; i < 3; ++i) row[11 + i] = p.color[i];
    }
    return out;
}

FilteredQueries filter_by_opacity(const std::vector<geom::GaussianPrimitive>& gaussians, const Array& features,
                                  const scene::Bounds& bounds, double alpha_thresh) {
    if (features.rank() != 2 || features.dim(0) != gaussians.size())
        throw ShapeError("filter_by_opacity: features must be [K,D] with one row per Gaussian");
    const std::size_t d = features.dim(1);
    std::vector<geom::GaussianPrimitive> kept;
    FilteredQueries out;
    for (std::size_t k = 0; k < gaussians.size(); ++k) {
        if (gaussians[k].opacity >= alpha_thresh) {
            out.kept.push_back(k);
            kept.push_back(gaussians[k]);
        }
    }
    out.anchors = encode_anchors(kept, bounds);
    out.features = Array({kept.size(), d});
    for (std::size_t j = 0; j < out.kept.size(); ++j)
        std::copy_n(features.data() + out.kept[j] * d, d, out.features.data() + j * d);
    return out;
}

std::vector<std::int64_t> knn_neighbors(const Array& task_positions, const Array& anchor_positions, std::size_t k) {
    if (k < 1) throw InvalidArgument("knn_neighbors: k must be at least 1");
    if (anchor_positions.rank() != 2 || anchor_positions.dim(1) != 3 || anchor_positions.dim(0) == 0)
        throw InvalidArgument("knn_neighbors needs at least one anchor position [N,3]");
    if (task_positions.rank() != 2 || task_positions.dim(1) != 3)
        throw ShapeError("knn_neighbors: task positions must be [M,3]");
    const std::size_t m = task_positions.dim(0), n = anchor_positions.dim(0);
    const std::size_t take = std::min(k, n);
    std::vector<std::int64_t> out(m * k);
    parallel_for(m, [&](std::size_t t) {
        std::vector<std::pair<double, std::size_t>> d(n);
        const double* q = task_positions.data() + t * 3;
        for (std::size_t j = 0; j < n; ++j) {
            const double* a = anchor_positions.data() + j * 3;
            const double dx = q[0] - a[0], dy = q[1] - a[1], dz = q[2] - a[2];
            d[j] = {dx * dx + dy * dy + dz * dz, j};
        }
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(take), d.end());
        for (std::size_t c = 0; c < k; ++c)
            out[t * k + c] = static_cast<std::int64_t>(d[c < take ? c : 0].second);
    });
    return out;
}

Array grid_centres(const scene::Bounds& bounds, std::size_t grid) {
    const geom::Vec3 step = bounds.size() / static_cast<double>(grid);
    Array out({grid * grid * grid, 3});
    std::size_t i = 0;
    for (std::size_t z = 0; z < grid; ++z)
        for (std::size_t y = 0; y < grid; ++y)
            for (std::size_t x = 0; x < grid; ++x, ++i) {
                out(i, 0) = bounds.min.x() + (x + 0.5) * step.x();
                out(i, 1) = bounds.min.y() + (y + 0.5) * step.y();
                out(i, 2) = bounds.min.z() + (z + 0.5) * step.z();
            }
    return out;
}

std::vector<int> occupancy_labels(const scene::Scene& scene, std::size_t grid) {
    std::vector<int> labels(grid * grid * grid, 0);
    const geom::Vec3 size = scene.bounds.size();
    for (const auto& g : scene.gaussians) {
        if (!(g.opacity > 0.5) || !scene.bounds.contains(g.mu)) continue;
        std::array<std::size_t, 3> c{};
        for (int a = 0; a < 3; ++a) {
            const double u = (g.mu[a] - scene.bounds.min[a]) / size[a] * static_cast<double>(grid);
            c[a] = std::min(grid - 1, static_cast<std::size_t>(std::max(0.0, std::floor(u))));
        }
        labels[(c[2] * grid + c[1]) * grid + c[0]] = 1;
    }
    return labels;
}

IoU evaluate_iou(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t classes) {
    if (pred.size() != gt.size()) throw ShapeError("evaluate_iou: prediction and ground truth differ in size");
    std::vector<std::size_t> inter(classes, 0), uni(classes, 0), present(classes, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto p = static_cast<std::size_t>(pred[i]), t = static_cast<std::size_t>(gt[i]);
        if (p >= classes || t >= classes) throw InvalidArgument("evaluate_iou: class label out of range");
        ++present[p];
        if (t != p) ++present[t];
        if (p == t) {
            ++inter[p];
            ++uni[p];
        } else {
            ++uni[p];
            ++uni[t];
        }
    }
    IoU r;
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        if (present[c] == 0) {
            r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        const double v = uni[c] ? static_cast<double>(inter[c]) / static_cast<double>(uni[c]) : 0.0;
        r.per_class.push_back(v);
        sum += v;
        ++counted;
    }
    r.mean = counted ? sum / static_cast<double>(counted) : 0.0;
    return r;
}

NodeRef local_query_interaction(Graph& g, NodeRef task_features, NodeRef task_positions, NodeRef anchors,
                                NodeRef anchor_features, NodeRef knn, NodeRef gate, const InteractionConfig& cfg,
                                const std::string& name, Rng& rng) {
    cfg.validate();
    Graph::Scope scope(g, name);
    const std::size_t m = g.shape(task_features).at(0), d = g.shape(task_features).at(1);
    const auto& ks = g.shape(knn);
    if (ks.size() != 2 || ks[0] != m) throw ShapeError("interaction: knn must be [M,k]");
    auto query = g.add(task_features, model::mlp2(g, task_positions, cfg.pos_hidden, d, "pos", rng));
    auto kv = g.add(model::linear(g, anchor_features, d, "adapter", rng),
                    model::mlp2(g, anchors, cfg.anchor_hidden, d, "anchor", rng));
    // Row-wise maps commute with the neighbour gather, so project the N
    // anchors once and gather keys and values.
    auto kv_norm = g.layer_norm(kv);
    auto q = g.reshape(model::linear(g, g.layer_norm(query), d, "q", rng), {m, 1, d});
    // No key bias: it adds the same q.b to every neighbour's logit.
    NodeRef key;
    {
        Graph::Scope scope(g, "k");
        const std::size_t dk = g.shape(kv_norm).back();
        key = g.gather(g.matmul(kv_norm, g.parameter("w", model::normal_init({dk, d}, dk, rng))), knn);  // [M,k,D]
    }
    auto value = g.gather(model::linear(g, kv_norm, d, "v", rng), knn);  // [M,k,D]
    auto w = g.softmax(g.scale(g.matmul(q, key, true), 1.0 / std::sqrt(static_cast<double>(d))));  // [M,1,k]
    auto attended = g.reshape(g.matmul(w, value), {m, d});
    // Zero output projection: the block starts as the identity and only
    // moves the task queries once training finds the anchors useful.
    auto projected = model::linear_with(g, attended, "out", Array({d, d}), Array({d}));
    return g.add(task_features, g.multiply(projected, gate));
}

NodeRef occupancy_head(Graph& g, NodeRef features, std::size_t hidden, std::size_t classes, const std::string& name,
                       Rng& rng) {
    return model::mlp2(g, features, hidden, classes, name, rng);
}

namespace {

pretrain::PretrainConfig inference_config(pretrain::PretrainConfig c) {
    c.render = render::RenderSettings{};
    return c;
}

} // namespace

FrozenPretrained::FrozenPretrained(const pretrain::PretrainConfig& config, const scene::Bounds& bounds,
                                   std::size_t views, int width, int height, const ad::NamedArrays& checkpoint)
    : model_(inference_config(config), bounds, views, width, height, false) {
    model_.load_parameters(checkpoint);
    for (const auto& name : model_.graph().parameter_names()) model_.graph().set_trainable(name, false);
}

PretrainedInference FrozenPretrained::infer(const scene::SceneSample& sample) {
    model_.forward(sample);
    return {model_.gaussians(), model_.graph().value(model_.decoder().final_features())};
}

std::size_t FrozenPretrained::queries() const {
    return model_.graph().shape(model_.decoder().final_features()).at(0);
}

std::size_t FrozenPretrained::feature_dim() const {
    return model_.graph().shape(model_.decoder().final_features()).at(1);
}

TaskModel::TaskModel(const FinetuneConfig& config, const model::EncoderConfig& encoder, const scene::Bounds& bounds,
                     std::size_t views, int width, int height, std::size_t pretrained_queries,
                     std::size_t pretrained_dim, const ad::NamedArrays* encoder_init)
    : graph_(std::make_unique<Graph>()), config_(config), bounds_(bounds), views_(views),
      m_(config.grid * config.grid * config.grid), width_(width), height_(height) {
    config.validate();
    Graph& g = *graph_;
    const std::size_t d = config.task_dim;
    positions_ = grid_centres(bounds, config.grid);
    Array normalised(positions_.shape());
    const double half = 0.5 * bounds.extent();
    for (std::size_t i = 0; i < m_; ++i)
        for (std::size_t a = 0; a < 3; ++a) normalised(i, a) = (positions_(i, a) - bounds.center()[a]) / half;

    auto images = g.input("images", {views, std::size_t(height), std::size_t(width), 3});
    auto cameras = g.input("cameras", {views, geom::kCameraRowSize});
    Rng rng(config.seed);
    const auto pyramid = model::encode(g, images, encoder, rng);
    if (encoder_init) {
        ad::NamedArrays enc;
        for (const auto& [name, value] : *encoder_init)
            if (name.rfind("encoder.", 0) == 0) enc.emplace_back(name, value);
        if (enc.empty()) throw FormatError("pretrained checkpoint holds no encoder parameters");
        g.load_parameters(enc);
    }

    Graph::Scope scope(g, "task");
    // Image features at each voxel centre, averaged over views.
    std::vector<NodeRef> sample_in = {g.constant(positions_), g.constant(Array({m_, 1, 3})), cameras};
    for (const auto& l : pyramid.levels) sample_in.push_back(l.map);
    auto sampled = g.custom(std::make_shared<model::DeformableSampleOp>(pyramid.levels, 1), sample_in);
    const std::size_t per_view = pyramid.levels.size() * pyramid.channels;
    auto image = g.reshape(g.mean_axis(g.reshape(sampled, {m_, views, per_view}), 1), {m_, per_view});

    auto pos = g.constant(normalised);
    auto features = g.add(g.parameter("queries", Array({m_, d})), model::linear(g, image, d, "image", rng));
    features = g.add(features, model::mlp2(g, pos, config.interaction.pos_hidden, d, "pos", rng));
    if (config.use_interaction) {
        // Separate stream so the shared parameters initialise identically
        // with and without interaction.
        Rng irng(config.seed ^ 0x5eedULL);
        features = local_query_interaction(g, features, pos, g.input("pre_anchors", {pretrained_queries, kAnchorCode}),
                                           g.input("pre_features", {pretrained_queries, pretrained_dim}),
                                           g.input("knn", {m_, config.interaction.k}), g.input("gate", {}),
                                           config.interaction, "interaction", irng);
    }
    logits_ = occupancy_head(g, g.layer_norm(features), config.head_hidden, 2, "head", rng);
    loss_ = g.cross_entropy(logits_, g.input("labels", {m_}));
}

std::map<std::string, Array> TaskModel::inputs(const TaskExample& ex) const {
    const auto H = static_cast<std::size_t>(height_), W = static_cast<std::size_t>(width_);
    if (ex.sample.views() != views_) throw InvalidArgument("task example view count differs from the model");
    Array images({views_, H, W, 3}), cams({views_, geom::kCameraRowSize});
    for (std::size_t v = 0; v < views_; ++v) {
        if (ex.sample.rgb[v].shape() != ad::Shape{H, W, 3}) throw InvalidArgument("task example image size differs");
        std::copy_n(ex.sample.rgb[v].data(), H * W * 3, images.data() + v * H * W * 3);
        const auto row = geom::camera_to_row(ex.sample.cameras[v]);
        std::copy(row.begin(), row.end(), cams.data() + v * geom::kCameraRowSize);
    }
    if (ex.labels.size() != m_) throw InvalidArgument("task example label grid differs from the model grid");
    Array labels({m_});
    for (std::size_t i = 0; i < m_; ++i) labels[i] = ex.labels[i];
    std::map<std::string, Array> in = {{"images", images}, {"cameras", cams}, {"labels", labels}};
    if (config_.use_interaction) {
        in["pre_anchors"] = ex.anchors;
        in["pre_features"] = ex.features;
        Array knn({m_, config_.interaction.k});
        for (std::size_t i = 0; i < knn.size(); ++i) knn[i] = static_cast<double>(ex.knn[i]);
        in["knn"] = std::move(knn);
        in["gate"] = Array::scalar(ex.gate ? 1.0 : 0.0);
    }
    return in;
}

double TaskModel::forward(const TaskExample& ex) {
    graph_->evaluate(inputs(ex));
    return graph_->value(loss_).item();
}

std::vector<int> TaskModel::predictions() const {
    const Array& l = graph_->value(logits_);
    std::vector<int> out(m_);
    for (std::size_t i = 0; i < m_; ++i) out[i] = l(i, 1) > l(i, 0) ? 1 : 0;
    return out;
}

std::size_t train_count(std::size_t n, double fraction) {
    if (n == 0) throw InvalidArgument("no training scenes");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("train fraction must lie in (0,1]");
    const auto c = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
    return std::clamp<std::size_t>(c, 1, n);
}

Finetuner::Finetuner(FinetuneConfig config, const pretrain::PretrainConfig& pretrained_config,
                     const ad::NamedArrays& checkpoint, const std::vector<scene::SceneRecord>& train,
                     const scene::Bounds& bounds)
    : config_(std::move(config)), bounds_(bounds) {
    config_.validate();
    if (train.empty()) throw InvalidArgument("fine-tuning needs at least one scene");
    const auto& s0 = train.front().sample;
    if (s0.views() == 0) throw InvalidArgument("scene without views");
    const int w = s0.cameras[0].width, h = s0.cameras[0].height;
    frozen_ = std::make_unique<FrozenPretrained>(pretrained_config, bounds, s0.views(), w, h, checkpoint);
    task_ = std::make_unique<TaskModel>(config_, pretrained_config.encoder, bounds, s0.views(), w, h,
                                        frozen_->queries(), frozen_->feature_dim(), &checkpoint);
    state_.hyper.weight_decay = config_.weight_decay;
    const std::size_t n = train_count(train.size(), config_.train_fraction);
    for (std::size_t i = 0; i < n; ++i) examples_.push_back(make_example(train[i]));
}

TaskExample Finetuner::make_example(const scene::SceneRecord& rec) {
    TaskExample ex;
    ex.sample = rec.sample;
    ex.labels = occupancy_labels(rec.scene, config_.grid);
    if (!config_.use_interaction) return ex;
    const auto inf = frozen_->infer(rec.sample);
    ex.anchors = encode_anchors(inf.gaussians, bounds_);
    ex.features = inf.features;
    const auto filtered = filter_by_opacity(inf.gaussians, inf.features, bounds_, config_.interaction.alpha_thresh);
    ex.kept = filtered.kept.size();
    const std::size_t m = task_->queries(), k = config_.interaction.k;
    ex.knn.assign(m * k, 0);
    if (filtered.empty()) {
        std::cerr << "warning: no pretrained query passes alpha_thresh " << config_.interaction.alpha_thresh
                  << " for scene " << rec.id << "; interaction is the identity\n";
        return ex;
    }
    Array pos({filtered.kept.size(), 3});
    for (std::size_t j = 0; j < filtered.kept.size(); ++j)
        for (int a = 0; a < 3; ++a) pos(j, a) = inf.gaussians[filtered.kept[j]].mu[a];
    const auto local = knn_neighbors(grid_centres(bounds_, config_.grid), pos, k);
    for (std::size_t i = 0; i < local.size(); ++i) ex.knn[i] = static_cast<std::int64_t>(filtered.kept[local[i]]);
    ex.gate = true;
    return ex;
}

FinetuneRecord Finetuner::step() {
    if (done()) throw InvalidArgument("fine-tuning already ran all " + std::to_string(config_.steps) + " steps");
    FinetuneRecord r;
    r.step = current_step() + 1;
    const auto& ex = examples_[(r.step - 1) % examples_.size()];
    r.loss = task_->forward(ex);
    if (!std::isfinite(r.loss)) throw NumericError("non-finite fine-tune loss at step " + std::to_string(r.step));
    const auto iou = evaluate_iou(task_->predictions(), ex.labels);
    r.iou_occupied = std::isnan(iou.per_class[1]) ? 0.0 : iou.per_class[1];
    r.miou = iou.mean;
    Graph& g = task_->graph();
    g.backpropagate(task_->loss());
    pretrain::adamw_step(g, state_, pretrain::lr_schedule(r.step, config_.steps, config_.warmup_steps, config_.lr_peak));
    return r;
}

void Finetuner::load_task_parameters(const ad::NamedArrays& records) {
    Graph& g = task_->graph();
    const auto names = g.parameter_names();
    if (records.size() != names.size())
        throw FormatError("task checkpoint holds " + std::to_string(records.size()) + " records, the task model has " +
                          std::to_string(names.size()) + " parameters");
    for (const auto& [name, value] : records)
        if (!g.has_parameter(name)) throw FormatError("task checkpoint record '" + name + "' is not a task parameter");
    g.load_parameters(records);
}

IoU Finetuner::evaluate(const std::vector<scene::SceneRecord>& scenes) {
    std::vector<int> pred, gt;
    for (const auto& rec : scenes) {
        const auto ex = make_example(rec);
        task_->forward(ex);
        const auto p = task_->predictions();
        pred.insert(pred.end(), p.begin(), p.end());
        gt.insert(gt.end(), ex.labels.begin(), ex.labels.end());
    }
    return evaluate_iou(pred, gt);
}

} // namespace sqs::finetune
