#include "heartpfl/model.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "heartpfl/optim.hpp"
#include "json.hpp"

namespace heartpfl {

void BackboneSpec::validate() const {
  if (input_dim == 0) throw std::invalid_argument("backbone: input_dim > 0");
  if (widths.size() < 2) {
    throw std::invalid_argument("backbone: need >= 2 stages for early/deep taps");
  }
  for (auto w : widths) {
    if (w == 0) throw std::invalid_argument("backbone: stage widths > 0");
  }
  if (num_classes < 2) throw std::invalid_argument("backbone: num_classes >= 2");
}

namespace {

Tensor he_matrix(std::size_t rows, std::size_t cols, Rng& rng, bool rg) {
  std::vector<double> v(rows * cols);
  const double s = std::sqrt(2.0 / static_cast<double>(rows));
  for (auto& x : v) x = rng.normal(0.0, s);
  return Tensor::matrix(rows, cols, std::move(v), rg);
}

}  // namespace

Backbone Backbone::init(const BackboneSpec& spec, Rng& rng, bool requires_grad) {
  spec.validate();
  Backbone b;
  b.spec = spec;
  std::size_t prev = spec.input_dim;
  for (auto w : spec.widths) {
    BackboneStage st;
    st.w1 = he_matrix(prev, w, rng, requires_grad);
    st.b1 = Tensor::vec(std::vector<double>(w, 0.0), requires_grad);
    st.w2 = he_matrix(w, w, rng, requires_grad);
    st.b2 = Tensor::vec(std::vector<double>(w, 0.0), requires_grad);
    b.stages.push_back(std::move(st));
    prev = w;
  }
  return b;
}

void Backbone::set_requires_grad(bool rg) {
  for (auto& st : stages) {
    st.w1.set_requires_grad(rg);
    st.b1.set_requires_grad(rg);
    st.w2.set_requires_grad(rg);
    st.b2.set_requires_grad(rg);
  }
}

std::vector<Tensor> Backbone::params() {
  std::vector<Tensor> out;
  for (auto& st : stages) {
    out.push_back(st.w1);
    out.push_back(st.b1);
    out.push_back(st.w2);
    out.push_back(st.b2);
  }
  return out;
}

std::size_t Backbone::param_count() const {
  std::size_t n = 0;
  for (const auto& st : stages) {
    n += st.w1.numel() + st.b1.numel() + st.w2.numel() + st.b2.numel();
  }
  return n;
}

std::uint64_t Backbone::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& st : stages) {
    h = fnv1a_doubles(st.w1.values(), h);
    h = fnv1a_doubles(st.b1.values(), h);
    h = fnv1a_doubles(st.w2.values(), h);
    h = fnv1a_doubles(st.b2.values(), h);
  }
  return h;
}

std::size_t backbone_param_count(const BackboneSpec& spec) {
  std::size_t n = 0;
  std::size_t prev = spec.input_dim;
  for (auto w : spec.widths) {
    n += prev * w + w;  // first linear
    n += w * w + w;     // second linear
    prev = w;
  }
  return n;
}

std::size_t adapter_param_count(const BackboneSpec& spec) {
  std::size_t n = 0;
  for (auto w : spec.widths) n += w * w + 2 * w;
  n += spec.widths.back() * spec.num_classes + spec.num_classes;  // head
  return n;
}

Adapter Adapter::init(const BackboneSpec& spec, double dropout_rate,
                      const Tensor& head_w, const Tensor& head_b) {
  Adapter a;
  a.dropout_rate = dropout_rate;
  for (auto w : spec.widths) {
    AdapterBlock blk;
    blk.norm_scale = Tensor::vec(std::vector<double>(w, 1.0), true);
    blk.norm_shift = Tensor::vec(std::vector<double>(w, 0.0), true);
    blk.linear = Tensor::matrix(w, w, std::vector<double>(w * w, 0.0), true);
    a.blocks.push_back(std::move(blk));
  }
  a.head_w = head_w.detached(true);
  a.head_b = head_b.detached(true);
  return a;
}

Adapter Adapter::clone(bool requires_grad) const {
  Adapter a;
  a.dropout_rate = dropout_rate;
  for (const auto& blk : blocks) {
    AdapterBlock c;
    c.norm_scale = blk.norm_scale.detached(requires_grad);
    c.norm_shift = blk.norm_shift.detached(requires_grad);
    c.linear = blk.linear.detached(requires_grad);
    a.blocks.push_back(std::move(c));
  }
  a.head_w = head_w.detached(requires_grad);
  a.head_b = head_b.detached(requires_grad);
  return a;
}

void Adapter::assign_from(const Adapter& src) {
  if (src.blocks.size() != blocks.size()) {
    throw ShapeError("adapter: block count mismatch in assign");
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].norm_scale.values() = src.blocks[i].norm_scale.values();
    blocks[i].norm_shift.values() = src.blocks[i].norm_shift.values();
    blocks[i].linear.values() = src.blocks[i].linear.values();
  }
  head_w.values() = src.head_w.values();
  head_b.values() = src.head_b.values();
}

std::vector<Tensor> Adapter::trainable() {
  std::vector<Tensor> out;
  for (auto& blk : blocks) {
    out.push_back(blk.norm_scale);
    out.push_back(blk.norm_shift);
    out.push_back(blk.linear);
  }
  out.push_back(head_w);
  out.push_back(head_b);
  return out;
}

std::vector<const Tensor*> Adapter::tensors() const {
  std::vector<const Tensor*> out;
  for (const auto& blk : blocks) {
    out.push_back(&blk.norm_scale);
    out.push_back(&blk.norm_shift);
    out.push_back(&blk.linear);
  }
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

std::size_t Adapter::param_count() const {
  std::size_t n = 0;
  for (const auto* t : tensors()) n += t->numel();
  return n;
}

std::uint64_t Adapter::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* t : tensors()) h = fnv1a_doubles(t->values(), h);
  return h;
}

const char* role_name(ModelRole role) {
  switch (role) {
    case ModelRole::kGlobal: return "global";
    case ModelRole::kPersonalized: return "personalized";
    case ModelRole::kLocal: return "local";
  }
  return "unknown";
}

Model Model::clone(ModelRole new_role, bool trainable) const {
  Model m;
  m.backbone = backbone;  // shared, frozen
  m.adapter = adapter.clone(trainable);
  m.role = new_role;
  m.proto_dim = proto_dim;
  return m;
}

ParamCounts count_params(const Model& model) {
  return {model.backbone->param_count(), model.adapter.param_count()};
}

namespace {

// Fixed input standardization keeps trunk feature norms O(1) regardless of
// the data dimension, like the normalized features of the full-scale
// backbone this stands in for.
double input_scale(const BackboneSpec& spec) {
  return 1.0 / std::sqrt(static_cast<double>(spec.input_dim));
}

// Stage trunk then residual adapter block; returns the adapted activation.
Tensor stage_forward(const BackboneStage& st, const AdapterBlock& blk,
                     double dropout_rate, const Tensor& in, bool train,
                     Rng* rng) {
  Tensor h = relu(add(matmul(in, st.w1), st.b1));
  h = relu(add(matmul(h, st.w2), st.b2));
  Tensor a = feature_norm(h, blk.norm_scale, blk.norm_shift);
  if (train && dropout_rate > 0.0) {
    if (rng == nullptr) {
      throw std::invalid_argument("forward: training pass needs an rng for dropout");
    }
    a = dropout(a, dropout_rate, true, *rng);
  }
  return add(h, matmul(a, blk.linear));
}

FeatureBundle forward_impl(const Model& model, const Tensor& x, bool train,
                           Rng* rng, bool with_features) {
  if (x.rank() != 2 || x.cols() != model.spec().input_dim) {
    throw ShapeError("forward: input " + shape_str(x.shape()) +
                     " does not match input_dim " +
                     std::to_string(model.spec().input_dim));
  }
  if (model.adapter.blocks.size() != model.backbone->stages.size()) {
    throw ShapeError("forward: adapter/backbone stage count mismatch");
  }
  FeatureBundle out;
  Tensor h = scale(x, input_scale(model.spec()));
  for (std::size_t s = 0; s < model.backbone->stages.size(); ++s) {
    h = stage_forward(model.backbone->stages[s], model.adapter.blocks[s],
                      model.adapter.dropout_rate, h, train, rng);
    if (with_features) {
      out.features.push_back(segment_mean_pool(h, model.proto_dim));
    }
  }
  out.logits = add(matmul(h, model.adapter.head_w), model.adapter.head_b);
  return out;
}

}  // namespace

FeatureBundle forward_with_features(const Model& model, const Tensor& x,
                                    bool train, Rng* rng) {
  return forward_impl(model, x, train, rng, true);
}

Tensor forward_logits(const Model& model, const Tensor& x, bool train,
                      Rng* rng) {
  return forward_impl(model, x, train, rng, false).logits;
}

Model pretrain_and_freeze(const BackboneSpec& spec, const Dataset& pool,
                          const PretrainConfig& cfg, std::uint64_t seed) {
  spec.validate();
  pool.validate();
  if (pool.dim != spec.input_dim || pool.num_classes > spec.num_classes) {
    throw std::invalid_argument("pretrain: pool does not match backbone spec");
  }
  Rng init_rng(derive_seed(seed, hash_tag("backbone-init")));
  auto backbone = std::make_shared<Backbone>(Backbone::init(spec, init_rng, true));
  Tensor head_w = he_matrix(spec.widths.back(), spec.num_classes, init_rng, true);
  Tensor head_b = Tensor::vec(std::vector<double>(spec.num_classes, 0.0), true);

  if (cfg.epochs > 0) {
    std::vector<Tensor> params = backbone->params();
    params.push_back(head_w);
    params.push_back(head_b);
    Optimizer opt(OptimizerKind::kAdam, cfg.lr);
    Rng order_rng(derive_seed(seed, hash_tag("pretrain-order")));
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t batch = std::max<std::size_t>(1, cfg.batch);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      order_rng.shuffle(order);
      for (std::size_t off = 0; off < order.size(); off += batch) {
        const std::size_t hi = std::min(order.size(), off + batch);
        std::vector<std::size_t> idx(order.begin() + off, order.begin() + hi);
        Tensor x = pool.batch_features(idx);
        // Plain trunk pass: adapters do not exist yet at pretraining time.
        Tensor h = scale(x, input_scale(spec));
        for (const auto& st : backbone->stages) {
          h = relu(add(matmul(h, st.w1), st.b1));
          h = relu(add(matmul(h, st.w2), st.b2));
        }
        Tensor logits = add(matmul(h, head_w), head_b);
        Tensor loss = cross_entropy(logits, pool.batch_labels(idx));
        opt.zero_grad(params);
        backward(loss);
        opt.step(params);
      }
    }
  }

  backbone->set_requires_grad(false);
  Model m;
  m.backbone = backbone;
  m.adapter = Adapter::init(spec, cfg.dropout_rate, head_w, head_b);
  m.role = ModelRole::kGlobal;
  m.proto_dim = cfg.proto_dim;
  if (m.proto_dim == 0 || m.proto_dim > *std::min_element(spec.widths.begin(),
                                                          spec.widths.end())) {
    throw std::invalid_argument("pretrain: proto_dim must be in [1, min stage width]");
  }
  return m;
}

Adapter clone_adapter(const Model& src) { return src.adapter.clone(true); }

// ---- checkpoint io ----------------------------------------------------------

namespace {

using nlohmann::json;

json tensor_to_json(const Tensor& t) {
  json j;
  j["shape"] = t.shape();
  j["values"] = t.values();
  return j;
}

Tensor tensor_from_json(const json& j, bool requires_grad) {
  std::vector<std::size_t> shape = j.at("shape").get<std::vector<std::size_t>>();
  std::vector<double> values = j.at("values").get<std::vector<double>>();
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

}  // namespace

void save_model(const Model& model, const std::string& path) {
  json j;
  j["format"] = "heartpfl-model";
  j["version"] = 1;
  j["role"] = role_name(model.role);
  j["proto_dim"] = model.proto_dim;
  j["spec"] = {{"input_dim", model.spec().input_dim},
               {"widths", model.spec().widths},
               {"num_classes", model.spec().num_classes}};
  json stages = json::array();
  for (const auto& st : model.backbone->stages) {
    stages.push_back({{"w1", tensor_to_json(st.w1)},
                      {"b1", tensor_to_json(st.b1)},
                      {"w2", tensor_to_json(st.w2)},
                      {"b2", tensor_to_json(st.b2)}});
  }
  j["backbone"] = std::move(stages);
  json blocks = json::array();
  for (const auto& blk : model.adapter.blocks) {
    blocks.push_back({{"norm_scale", tensor_to_json(blk.norm_scale)},
                      {"norm_shift", tensor_to_json(blk.norm_shift)},
                      {"linear", tensor_to_json(blk.linear)}});
  }
  j["adapter"] = {{"dropout", model.adapter.dropout_rate},
                  {"blocks", std::move(blocks)},
                  {"head_w", tensor_to_json(model.adapter.head_w)},
                  {"head_b", tensor_to_json(model.adapter.head_b)}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_model: cannot open " + path);
  out << j.dump() << '\n';
}

Model load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_model: cannot open " + path);
  json j;
  in >> j;
  if (j.value("format", "") != "heartpfl-model" || j.value("version", 0) != 1) {
    throw std::runtime_error("load_model: unrecognized checkpoint format");
  }
  BackboneSpec spec;
  spec.input_dim = j["spec"]["input_dim"].get<std::size_t>();
  spec.widths = j["spec"]["widths"].get<std::vector<std::size_t>>();
  spec.num_classes = j["spec"]["num_classes"].get<std::size_t>();
  spec.validate();
  auto backbone = std::make_shared<Backbone>();
  backbone->spec = spec;
  for (const auto& st : j["backbone"]) {
    BackboneStage s;
    s.w1 = tensor_from_json(st["w1"], false);
    s.b1 = tensor_from_json(st["b1"], false);
    s.w2 = tensor_from_json(st["w2"], false);
    s.b2 = tensor_from_json(st["b2"], false);
    backbone->stages.push_back(std::move(s));
  }
  Model m;
  m.backbone = backbone;
  m.proto_dim = j["proto_dim"].get<std::size_t>();
  const std::string role = j["role"].get<std::string>();
  m.role = role == "personalized" ? ModelRole::kPersonalized
           : role == "local"      ? ModelRole::kLocal
                                  : ModelRole::kGlobal;
  m.adapter.dropout_rate = j["adapter"]["dropout"].get<double>();
  for (const auto& blk : j["adapter"]["blocks"]) {
    AdapterBlock b;
    b.norm_scale = tensor_from_json(blk["norm_scale"], true);
    b.norm_shift = tensor_from_json(blk["norm_shift"], true);
    b.linear = tensor_from_json(blk["linear"], true);
    m.adapter.blocks.push_back(std::move(b));
  }
  m.adapter.head_w = tensor_from_json(j["adapter"]["head_w"], true);
  m.adapter.head_b = tensor_from_json(j["adapter"]["head_b"], true);
  return m;
}

}  // namespace heartpfl
