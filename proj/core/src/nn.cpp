#include "taskvec/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "taskvec/errors.hpp"

namespace taskvec {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;
using ConstRowVec = Eigen::Map<const Eigen::RowVectorXd>;
using MutRowVec = Eigen::Map<Eigen::RowVectorXd>;

std::string_view to_string(Activation activation) {
  return activation == Activation::Tanh ? "tanh" : "gelu";
}

Activation activation_from_string(std::string_view text) {
  if (text == "tanh") return Activation::Tanh;
  if (text == "gelu") return Activation::Gelu;
  throw ValidationError("unknown activation '" + std::string(text) +
                        "' (twice-differentiable choices: tanh, gelu)");
}

void NetSpec::validate() const {
  if (input_dim < 1) throw ValidationError("input_dim must be >= 1");
  for (auto h : hidden)
    if (h < 1) throw ValidationError("hidden widths must be >= 1");
  for (auto c : head_dims)
    if (c < 1) throw ValidationError("head sizes must be >= 1");
}

Batch Batch::rows(const std::vector<std::size_t>& indices) const {
  Batch out;
  out.inputs.resize(static_cast<Eigen::Index>(indices.size()), inputs.cols());
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(indices[i]));
    out.labels.push_back(labels[indices[i]]);
  }
  return out;
}

Batch concat(const std::vector<const Batch*>& parts) {
  Batch out;
  Eigen::Index rows = 0, cols = 0;
  for (const auto* p : parts) {
    if (p->empty()) continue;
    if (cols != 0 && p->inputs.cols() != cols) throw LayoutError("cannot concatenate batches of different width");
    cols = p->inputs.cols();
    rows += p->inputs.rows();
  }
  out.inputs.resize(rows, cols);
  Eigen::Index at = 0;
  for (const auto* p : parts) {
    if (p->empty()) continue;
    out.inputs.middleRows(at, p->inputs.rows()) = p->inputs;
    at += p->inputs.rows();
    out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
  }
  return out;
}

double local_cross_entropy(std::span<const double> logits, int label, ClassRange range) {
  if (range.end > logits.size() || range.start >= range.end)
    throw ValidationError("class range does not fit the logits");
  if (!range.contains(label))
    throw ValidationError("label " + std::to_string(label) + " lies outside the class range [" +
                          std::to_string(range.start) + ", " + std::to_string(range.end) + ")");
  double top = -std::numeric_limits<double>::infinity();
  for (auto c = range.start; c < range.end; ++c) top = std::max(top, logits[c]);
  double sum = 0.0;
  for (auto c = range.start; c < range.end; ++c) sum += std::exp(logits[c] - top);
  return top + std::log(sum) - logits[static_cast<std::size_t>(label)];
}

namespace {

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); }

double gelu_prime(double z) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(z / std::sqrt(2.0))) + z * inv_sqrt_2pi * std::exp(-0.5 * z * z);
}

std::string weight_name(std::size_t layer) { return "backbone." + std::to_string(layer) + ".weight"; }
std::string bias_name(std::size_t layer) { return "backbone." + std::to_string(layer) + ".bias"; }

struct HeadSlice {
  std::size_t weight_entry;
  std::size_t bias_entry;
  std::size_t row_begin;  // first head row inside the range
  std::size_t row_count;
  std::size_t col;        // column inside the range-local logit matrix
};

// Heads whose classes intersect `range`, with the rows that fall inside it.
std::vector<HeadSlice> heads_in_range(const ParamLayout& layout, ClassRange range) {
  std::vector<HeadSlice> out;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < layout.num_entries(); ++i) {
    const auto& e = layout.entry(i);
    if (e.kind != EntryKind::HeadWeight) continue;
    const std::size_t bias = i + 1;
    if (bias >= layout.num_entries() || layout.entry(bias).kind != EntryKind::HeadBias)
      throw LayoutError("head weight '" + e.name + "' is not followed by its bias");
    const std::size_t classes = e.rows();
    const std::size_t lo = std::max(offset, range.start);
    const std::size_t hi = std::min(offset + classes, range.end);
    if (lo < hi) out.push_back({i, bias, lo - offset, hi - lo, lo - range.start});
    offset += classes;
  }
  return out;
}

}  // namespace

struct Network::Trace {
  std::vector<Matrix> pre;   // pre-activations per hidden layer
  std::vector<Matrix> post;  // post[0] = inputs, post[l+1] = act(pre[l])
  std::vector<HeadSlice> heads;
  Matrix logits;             // n x range.size()
};

Network::Network(NetSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

ParamLayout Network::layout() const {
  ParamLayout layout;
  std::size_t in = spec_.input_dim;
  for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
    layout.append(weight_name(l), {spec_.hidden[l], in}, EntryKind::BackboneWeight);
    layout.append(bias_name(l), {spec_.hidden[l]}, EntryKind::BackboneBias);
    in = spec_.hidden[l];
  }
  int task = 1;
  for (auto classes : spec_.head_dims) {
    layout.append("head." + std::to_string(task) + ".weight", {classes, in}, EntryKind::HeadWeight, task);
    layout.append("head." + std::to_string(task) + ".bias", {classes}, EntryKind::HeadBias, task);
    ++task;
  }
  return layout;
}

ParamVector Network::init(std::uint64_t seed, double weight_scale) const {
  ParamVector theta(layout());
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < theta.layout().num_entries(); ++i) {
    const auto& e = theta.layout().entry(i);
    if (e.kind != EntryKind::BackboneWeight) continue;
    std::normal_distribution<double> normal(0.0, weight_scale / std::sqrt(double(e.cols())));
    for (auto& v : theta.entry(i)) v = normal(rng);
  }
  return theta;
}

void Network::check(const ParamVector& theta) const {
  const auto& layout = theta.layout();
  std::size_t in = spec_.input_dim;
  for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
    auto w = layout.find(weight_name(l));
    auto b = layout.find(bias_name(l));
    if (!w || !b || layout.entry(*w).shape != std::vector<std::size_t>{spec_.hidden[l], in} ||
        layout.entry(*b).shape != std::vector<std::size_t>{spec_.hidden[l]})
      throw LayoutError("parameters do not match backbone layer " + std::to_string(l));
    in = spec_.hidden[l];
  }
  for (const auto& e : layout.entries())
    if (e.kind == EntryKind::HeadWeight && e.cols() != in)
      throw LayoutError("head '" + e.name + "' expects " + std::to_string(e.cols()) +
                        " features, backbone yields " + std::to_string(in));
}

Network::Trace Network::run(const ParamVector& theta, const Matrix& inputs, ClassRange range) const {
  if (static_cast<std::size_t>(inputs.cols()) != spec_.input_dim)
    throw LayoutError("inputs have " + std::to_string(inputs.cols()) + " columns, network expects " +
                      std::to_string(spec_.input_dim));
  const auto& layout = theta.layout();
  Trace trace;
  trace.post.push_back(inputs);
  std::size_t in = spec_.input_dim;
  for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
    const auto out = spec_.hidden[l];
    ConstMap w(theta.entry(*layout.find(weight_name(l))).data(), Eigen::Index(out), Eigen::Index(in));
    ConstRowVec b(theta.entry(*layout.find(bias_name(l))).data(), Eigen::Index(out));
    Matrix z = trace.post.back() * w.transpose();
    z.rowwise() += b;
    Matrix h = spec_.activation == Activation::Tanh ? Matrix(z.array().tanh())
                                                    : Matrix(z.unaryExpr([](double v) { return gelu(v); }));
    trace.pre.push_back(std::move(z));
    trace.post.push_back(std::move(h));
    in = out;
  }

  trace.heads = heads_in_range(layout, range);
  const auto& feats = trace.post.back();
  trace.logits.setZero(feats.rows(), Eigen::Index(range.size()));
  for (const auto& hs : trace.heads) {
    const auto& we = layout.entry(hs.weight_entry);
    if (we.cols() != in) throw LayoutError("head width does not match the backbone");
    ConstMap w(theta.entry(hs.weight_entry).data() + hs.row_begin * in, Eigen::Index(hs.row_count),
               Eigen::Index(in));
    ConstRowVec b(theta.entry(hs.bias_entry).data() + hs.row_begin, Eigen::Index(hs.row_count));
    auto block = trace.logits.middleCols(Eigen::Index(hs.col), Eigen::Index(hs.row_count));
    block = feats * w.transpose();
    block.rowwise() += b;
  }
  return trace;
}

ParamVector Network::backward(const ParamVector& theta, const Trace& trace, const Matrix& dlogits) const {
  const auto& layout = theta.layout();
  ParamVector grad(layout);
  const Matrix& feats = trace.post.back();
  const auto in = Eigen::Index(feats.cols());
  Matrix dh = Matrix::Zero(feats.rows(), in);
  for (const auto& hs : trace.heads) {
    const auto rows = Eigen::Index(hs.row_count);
    auto d = dlogits.middleCols(Eigen::Index(hs.col), rows);
    MutMap gw(grad.entry(hs.weight_entry).data() + hs.row_begin * std::size_t(in), rows, in);
    MutRowVec gb(grad.entry(hs.bias_entry).data() + hs.row_begin, rows);
    gw = d.transpose() * feats;
    gb = d.colwise().sum();
    ConstMap w(theta.entry(hs.weight_entry).data() + hs.row_begin * std::size_t(in), rows, in);
    dh.noalias() += d * w;
  }

  for (std::size_t l = spec_.hidden.size(); l-- > 0;) {
    const auto out = Eigen::Index(spec_.hidden[l]);
    const auto prev = Eigen::Index(trace.post[l].cols());
    Matrix dz;
    if (spec_.activation == Activation::Tanh) {
      dz = dh.array() * (1.0 - trace.post[l + 1].array().square());
    } else {
      dz = dh.array() * trace.pre[l].unaryExpr([](double v) { return gelu_prime(v); }).array();
    }
    MutMap gw(grad.entry(*layout.find(weight_name(l))).data(), out, prev);
    MutRowVec gb(grad.entry(*layout.find(bias_name(l))).data(), out);
    gw = dz.transpose() * trace.post[l];
    gb = dz.colwise().sum();
    if (l > 0) {
      ConstMap w(theta.entry(*layout.find(weight_name(l))).data(), out, prev);
      dh = dz * w;
    }
  }
  return grad;
}

Matrix Network::forward(const ParamVector& theta, const Matrix& inputs) const {
  check(theta);
  return run(theta, inputs, ClassRange{0, theta.layout().num_classes()}).logits;
}

Matrix Network::features(const ParamVector& theta, const Matrix& inputs) const {
  check(theta);
  return run(theta, inputs, ClassRange{0, 0}).post.back();
}

Matrix Network::head_logits(const ParamVector& theta, const Matrix& features) const {
  const auto& layout = theta.layout();
  const ClassRange all{0, layout.num_classes()};
  Matrix logits = Matrix::Zero(features.rows(), Eigen::Index(all.size()));
  for (const auto& hs : heads_in_range(layout, all)) {
    const auto in = Eigen::Index(features.cols());
    ConstMap w(theta.entry(hs.weight_entry).data(), Eigen::Index(hs.row_count), in);
    ConstRowVec b(theta.entry(hs.bias_entry).data(), Eigen::Index(hs.row_count));
    auto block = logits.middleCols(Eigen::Index(hs.col), Eigen::Index(hs.row_count));
    block = features * w.transpose();
    block.rowwise() += b;
  }
  return logits;
}

namespace {

void check_labels(const Batch& batch, ClassRange range) {
  if (batch.empty()) throw ValidationError("batch is empty");
  if (static_cast<std::size_t>(batch.inputs.rows()) != batch.size())
    throw LayoutError("batch inputs and labels disagree in length");
  for (int y : batch.labels)
    if (!range.contains(y))
      throw ValidationError("label " + std::to_string(y) + " lies outside the class range [" +
                            std::to_string(range.start) + ", " + std::to_string(range.end) + ")");
}

// Fills `dlogits` with (softmax - onehot)/n and returns the mean loss.
double softmax_ce(const Matrix& logits, const std::vector<int>& labels, std::size_t start, Matrix* dlogits) {
  const auto n = logits.rows();
  if (dlogits) dlogits->resize(n, logits.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double top = logits.row(i).maxCoeff();
    const double sum = (logits.row(i).array() - top).exp().sum();
    const double lse = top + std::log(sum);
    const auto y = Eigen::Index(labels[std::size_t(i)]) - Eigen::Index(start);
    total += lse - logits(i, y);
    if (dlogits) {
      dlogits->row(i) = (logits.row(i).array() - lse).exp();
      (*dlogits)(i, y) -= 1.0;
    }
  }
  if (dlogits) *dlogits /= double(n);
  return total / double(n);
}

}  // namespace

double Network::loss(const ParamVector& theta, const Batch& batch, ClassRange range) const {
  check(theta);
  check_labels(batch, range);
  auto trace = run(theta, batch.inputs, range);
  return softmax_ce(trace.logits, batch.labels, range.start, nullptr);
}

LossGrad Network::loss_and_grad(const ParamVector& theta, const Batch& batch, ClassRange range) const {
  check(theta);
  check_labels(batch, range);
  if (range.end > theta.layout().num_classes())
    throw ValidationError("class range exceeds the heads present in theta");
  auto trace = run(theta, batch.inputs, range);
  Matrix dlogits;
  const double value = softmax_ce(trace.logits, batch.labels, range.start, &dlogits);
  if (!std::isfinite(value))
    throw NumericError("non-finite loss; parameter norm " + std::to_string(theta.norm()));
  return {value, backward(theta, trace, dlogits)};
}

ParamVector Network::logit_vjp(const ParamVector& theta, std::span<const double> input, ClassRange range,
                               std::span<const double> dlogits) const {
  if (dlogits.size() != range.size()) throw LayoutError("dlogits must have one entry per class in range");
  Matrix x = ConstRowVec(input.data(), Eigen::Index(input.size()));
  auto trace = run(theta, x, range);
  Matrix d = ConstRowVec(dlogits.data(), Eigen::Index(dlogits.size()));
  return backward(theta, trace, d);
}

std::vector<double> Network::local_probabilities(const ParamVector& theta, std::span<const double> input,
                                                 ClassRange range) const {
  Matrix x = ConstRowVec(input.data(), Eigen::Index(input.size()));
  auto trace = run(theta, x, range);
  const double top = trace.logits.row(0).maxCoeff();
  Eigen::RowVectorXd e = (trace.logits.row(0).array() - top).exp();
  e /= e.sum();
  return {e.data(), e.data() + e.size()};
}

std::vector<ParamVector> Network::log_prob_grads(const ParamVector& theta, std::span<const double> input,
                                                ClassRange range, std::vector<double>& probs) const {
  Matrix x = ConstRowVec(input.data(), Eigen::Index(input.size()));
  auto trace = run(theta, x, range);
  const double top = trace.logits.row(0).maxCoeff();
  Eigen::RowVectorXd p = (trace.logits.row(0).array() - top).exp();
  p /= p.sum();
  probs.assign(p.data(), p.data() + p.size());
  std::vector<ParamVector> grads;
  grads.reserve(range.size());
  for (Eigen::Index c = 0; c < p.size(); ++c) {
    Matrix d = -p;
    d(0, c) += 1.0;
    grads.push_back(backward(theta, trace, d));
  }
  return grads;
}

ParamVector add_head(const ParamVector& theta0, std::size_t num_classes) {
  if (num_classes < 1) throw ValidationError("a head needs at least one class");
  ParamLayout layout = theta0.layout();
  std::size_t features = 0;
  int last_head = 0;
  for (const auto& e : layout.entries()) {
    if (e.kind == EntryKind::BackboneWeight) features = e.rows();
    if (e.is_head()) last_head = std::max(last_head, e.task_id);
  }
  if (features == 0) {
    // No hidden layer: reuse the width of an existing head, otherwise the
    // caller must already have a head to copy from.
    for (const auto& e : layout.entries())
      if (e.kind == EntryKind::HeadWeight) features = e.cols();
    if (features == 0) throw LayoutError("cannot infer the feature width for a new head");
  }
  const int task = last_head + 1;
  layout.append("head." + std::to_string(task) + ".weight", {num_classes, features}, EntryKind::HeadWeight, task);
  layout.append("head." + std::to_string(task) + ".bias", {num_classes}, EntryKind::HeadBias, task);
  return theta0.extended_to(layout);
}

ParamVector add_head(const Network& net, const ParamVector& theta0, std::size_t num_classes) {
  net.check(theta0);
  if (num_classes < 1) throw ValidationError("a head needs at least one class");
  ParamLayout layout = theta0.layout();
  const int task = layout.num_heads() + 1;
  layout.append("head." + std::to_string(task) + ".weight", {num_classes, net.feature_dim()},
                EntryKind::HeadWeight, task);
  layout.append("head." + std::to_string(task) + ".bias", {num_classes}, EntryKind::HeadBias, task);
  return theta0.extended_to(layout);
}

ClassRange head_range(const ParamLayout& layout, int task_id) {
  const auto start = layout.class_offset(task_id);
  const auto& bias = layout.at("head." + std::to_string(task_id) + ".bias");
  return {start, start + bias.size()};
}

std::vector<int> predict(const Matrix& logits) {
  std::vector<int> out(std::size_t(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    out[std::size_t(i)] = int(best);
  }
  return out;
}

double accuracy(const Matrix& logits, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  auto pred = predict(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return double(hits) / double(labels.size());
}

Eigen::MatrixXd finite_difference_jacobian(const GradientFn& grad, const std::vector<double>& x,
                                           double rel_step) {
  const auto m = x.size();
  Eigen::MatrixXd jac;
  std::vector<double> probe = x;
  for (std::size_t j = 0; j < m; ++j) {
    const double h = rel_step * std::max(1.0, std::abs(x[j]));
    probe[j] = x[j] + h;
    auto plus = grad(probe);
    probe[j] = x[j] - h;
    auto minus = grad(probe);
    probe[j] = x[j];
    if (j == 0) jac.resize(Eigen::Index(plus.size()), Eigen::Index(m));
    for (std::size_t i = 0; i < plus.size(); ++i)
      jac(Eigen::Index(i), Eigen::Index(j)) = (plus[i] - minus[i]) / (2.0 * h);
  }
  return jac;
}

Eigen::MatrixXd exact_hessian(const Network& net, const ParamVector& theta, const Batch& batch,
                              ClassRange range) {
  if (theta.size() > kMaxDenseParams)
    throw CapacityError("dense Hessian requested for " + std::to_string(theta.size()) +
                        " parameters; the guard is " + std::to_string(kMaxDenseParams));
  const auto& layout = theta.layout();
  GradientFn grad = [&](const std::vector<double>& x) {
    return net.loss_and_grad(ParamVector(layout, x), batch, range).grad.raw();
  };
  Eigen::MatrixXd h = finite_difference_jacobian(grad, theta.raw());
  return 0.5 * (h + h.transpose());
}

ParamVector fit_heads(const Network& net, const ParamVector& theta, const Matrix& features,
                      const std::vector<int>& labels, ClassRange range, const std::vector<int>& head_ids,
                      const ProbeOptions& options) {
  if (labels.empty()) throw ValidationError("no samples to fit heads on");
  if (static_cast<std::size_t>(features.cols()) != net.feature_dim())
    throw LayoutError("feature width does not match the network");
  for (int y : labels)
    if (!range.contains(y)) throw ValidationError("label outside the head-fitting class range");
  const auto& layout = theta.layout();
  std::vector<char> trainable(layout.num_entries(), 0);
  for (int id : head_ids) {
    trainable[*layout.find("head." + std::to_string(id) + ".weight")] = 1;
    trainable[*layout.find("head." + std::to_string(id) + ".bias")] = 1;
  }

  ParamVector out = theta;
  const auto slices = heads_in_range(layout, range);
  const auto in = Eigen::Index(features.cols());
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(options.seed);
  const std::size_t bs = std::max<std::size_t>(1, options.batch_size);

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      const std::size_t end = std::min(order.size(), begin + bs);
      const auto n = Eigen::Index(end - begin);
      Matrix f(n, in);
      std::vector<int> y(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        f.row(Eigen::Index(i - begin)) = features.row(Eigen::Index(order[i]));
        y[i - begin] = labels[order[i]];
      }
      Matrix logits = Matrix::Zero(n, Eigen::Index(range.size()));
      for (const auto& hs : slices) {
        ConstMap w(out.entry(hs.weight_entry).data() + hs.row_begin * std::size_t(in), Eigen::Index(hs.row_count), in);
        ConstRowVec b(out.entry(hs.bias_entry).data() + hs.row_begin, Eigen::Index(hs.row_count));
        auto block = logits.middleCols(Eigen::Index(hs.col), Eigen::Index(hs.row_count));
        block = f * w.transpose();
        block.rowwise() += b;
      }
      Matrix d;
      softmax_ce(logits, y, range.start, &d);
      for (const auto& hs : slices) {
        if (!trainable[hs.weight_entry]) continue;
        const auto rows = Eigen::Index(hs.row_count);
        auto dd = d.middleCols(Eigen::Index(hs.col), rows);
        MutMap w(out.entry(hs.weight_entry).data() + hs.row_begin * std::size_t(in), rows, in);
        MutRowVec b(out.entry(hs.bias_entry).data() + hs.row_begin, rows);
        w.noalias() -= options.lr * (dd.transpose() * f);
        b.noalias() -= options.lr * dd.colwise().sum();
      }
    }
  }
  return out;
}

ParamVector linear_probe(const Network& net, const ParamVector& theta0, const Batch& data, int head_id,
                         const ProbeOptions& options) {
  const auto range = head_range(theta0.layout(), head_id);
  if (options.epochs == 0) return theta0;
  Matrix feats = net.features(theta0, data.inputs);
  return fit_heads(net, theta0, feats, data.labels, range, {head_id}, options);
}

}  // namespace taskvec
