#include "taskvec/verify.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <random>

#include "taskvec/data.hpp"
#include "taskvec/errors.hpp"
#include "taskvec/fisher.hpp"
#include "taskvec/regularizers.hpp"
#include "taskvec/trainers.hpp"
#include "parallel.hpp"

namespace taskvec::verify {

namespace {

using Rng = std::mt19937_64;

double gauss(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }
double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Vector randn(Eigen::Index n, Rng& rng) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = gauss(rng);
  return v;
}

Eigen::MatrixXd random_psd(Eigen::Index n, Rng& rng) {
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = gauss(rng);
  Eigen::MatrixXd h = a * a.transpose() / double(n);
  return 0.5 * (h + h.transpose());
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  double total = 0.0;
  for (auto& x : w) total += (x = uniform(rng, 0.1, 1.0));
  double head = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) head += (w[i] /= total);
  w.back() = 1.0 - head;
  return w;
}

ParamVector random_params(const ParamLayout& layout, Rng& rng, double scale = 1.0) {
  ParamVector v(layout);
  for (auto& x : v.values()) x = scale * gauss(rng);
  return v;
}

Batch random_batch(std::size_t n, std::size_t dim, ClassRange range, Rng& rng) {
  Batch b;
  b.inputs.resize(Eigen::Index(n), Eigen::Index(dim));
  for (Eigen::Index i = 0; i < b.inputs.size(); ++i) b.inputs.data()[i] = gauss(rng);
  std::uniform_int_distribution<int> pick(int(range.start), int(range.end) - 1);
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(pick(rng));
  return b;
}

using detail::parallel_for;

VerificationReport make(std::string check, double tolerance) {
  VerificationReport r;
  r.check = std::move(check);
  r.tolerance = tolerance;
  return r;
}

std::size_t bit_mismatches(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::max(a.size(), b.size());
  std::size_t bad = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) ++bad;
  return bad;
}

double max_abs_diff(const Vector& a, const Vector& b) { return (a - b).cwiseAbs().maxCoeff(); }

double individual_mean(const QuadraticProxy& q, const std::vector<Vector>& taus, const std::vector<double>& w) {
  double acc = 0.0;
  for (std::size_t t = 0; t < taus.size(); ++t) acc += w[t] * q.eval(taus[t]);
  return acc;
}

// Random dense quadratic instance with T task vectors.
struct QuadInstance {
  QuadraticProxy q;
  std::vector<Vector> taus;
  std::vector<double> w;
};

QuadInstance random_quadratic(std::uint64_t seed, std::size_t index) {
  Rng rng(seed);
  const std::size_t sizes[] = {2, 3, 5};
  const auto dim = Eigen::Index(1 + rng() % 50);
  const std::size_t T = sizes[index % 3];
  auto q = QuadraticProxy::dense(gauss(rng), randn(dim, rng), random_psd(dim, rng));
  std::vector<Vector> taus;
  for (std::size_t t = 0; t < T; ++t) taus.push_back(randn(dim, rng));
  return {std::move(q), std::move(taus), random_weights(T, rng)};
}

// ---------------------------------------------------------------- decomposition

std::vector<VerificationReport> suite_decomposition(const Options& o) {
  auto rep = make("decomposition", 1e-9);
  {
    auto q = QuadraticProxy::dense(0.0, Vector::Zero(1), Eigen::MatrixXd::Constant(1, 1, 2.0));
    std::vector<Vector> taus{Vector::Constant(1, 1.0), Vector::Constant(1, -1.0)};
    std::vector<double> w{0.5, 0.5};
    rep.details["two_learner_example"] = {{"composed", q.eval(combine(taus, w))},
                                          {"individual_mean", individual_mean(q, taus, w)},
                                          {"omega", omega_quadratic(q, taus, w)},
                                          {"residual", decomposition_residual(q, taus, w)}};
  }
  std::vector<double> res(o.instances);
  std::vector<std::uint64_t> seeds(o.instances);
  parallel_for(o.instances, o.threads, [&](std::size_t i) {
    seeds[i] = mix_seed(o.seed, i);
    auto inst = random_quadratic(seeds[i], i);
    const double scale = std::max(1.0, std::abs(individual_mean(inst.q, inst.taus, inst.w)));
    res[i] = decomposition_residual(inst.q, inst.taus, inst.w) / scale;
  });
  for (std::size_t i = 0; i < res.size(); ++i) rep.record(res[i], seeds[i]);
  return {rep};
}

// ---------------------------------------------------------------- jensen

VerificationReport jensen_online(const Options& o) {
  // Linear-softmax verification net: the global risk is convex, so the exact
  // Hessian at theta0 is positive semi-definite at every task boundary.
  auto rep = make("jensen-online", 1e-8);
  BlobOptions bo;
  bo.tasks = 3;
  bo.classes_per_task = 2;
  bo.dim = 4;
  bo.samples_per_class = 20;
  bo.mean_scale = 1.5;
  bo.seed = o.seed;
  const auto stream = gen_blobs(bo);
  NetSpec ns;
  ns.input_dim = bo.dim;
  Network net(ns);
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 2;
  cfg.pre_epochs = 2;
  cfg.mog_components = 2;
  cfg.mog_samples = 16;
  cfg.align_epochs = 1;
  cfg.seed = o.seed;
  std::size_t inapplicable = 0;
  run_sequence(stream, net, net.init(o.seed), cfg, [&](const Learner& l, std::size_t t, const TaskStream& s) {
    std::vector<const Batch*> parts;
    for (std::size_t k = 0; k < t; ++k) parts.push_back(&s.tasks[k].val);
    const Batch val = concat(parts);
    const ParamVector& th0 = l.theta0();
    const ClassRange all{0, th0.layout().num_classes()};
    const LossGrad lg = l.net.loss_and_grad(th0, val, all);
    const auto q = QuadraticProxy::dense(lg.loss, to_eigen(lg.grad), exact_hessian(l.net, th0, val, all));
    std::vector<Vector> taus;
    for (int id = 1; id <= int(l.pool.count()); ++id) taus.push_back(to_eigen(l.pool.displacement(id)));
    const auto gap = jensen_gap(q, taus, l.pool.weights());
    if (!gap.applicable) ++inapplicable;
    rep.record(gap.applicable ? std::max(0.0, -gap.gap) : 0.0, t);
  });
  rep.details["inapplicable_boundaries"] = inapplicable;
  return rep;
}

std::vector<VerificationReport> suite_jensen(const Options& o) {
  auto gap_rep = make("jensen", 1e-10);
  auto omega_rep = make("jensen-omega", 1e-9);
  {
    auto q = QuadraticProxy::dense(0.0, Vector::Zero(1), Eigen::MatrixXd::Constant(1, 1, 2.0));
    std::vector<Vector> taus{Vector::Constant(1, 1.0), Vector::Constant(1, -1.0)};
    gap_rep.details["two_learner_gap"] = jensen_gap(q, taus, std::vector<double>{0.5, 0.5}).gap;
  }
  std::vector<double> gap(o.instances), dev(o.instances);
  std::vector<std::uint64_t> seeds(o.instances);
  std::vector<char> applicable(o.instances);
  parallel_for(o.instances, o.threads, [&](std::size_t i) {
    seeds[i] = mix_seed(o.seed ^ 0x6a656e73ULL, i);
    auto inst = random_quadratic(seeds[i], i);
    const auto g = jensen_gap(inst.q, inst.taus, inst.w);
    const double omega = omega_quadratic(inst.q, inst.taus, inst.w);
    applicable[i] = g.applicable;
    gap[i] = std::max(0.0, -g.gap);
    dev[i] = std::abs(g.gap - omega) / std::max(1.0, std::abs(omega));
  });
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < gap.size(); ++i) {
    if (!applicable[i]) {
      ++skipped;
      continue;
    }
    gap_rep.record(gap[i], seeds[i]);
    omega_rep.record(dev[i], seeds[i]);
  }
  gap_rep.details["inapplicable"] = skipped;
  return {gap_rep, omega_rep, jensen_online(o)};
}

// ---------------------------------------------------------------- omega-forms

std::vector<VerificationReport> suite_omega_forms(const Options& o) {
  auto forms = make("omega-forms", 1e-10);
  auto interp = make("interpolation", 1e-10);
  auto mean = make("omega-common-mean", 1e-12);
  const std::size_t n = o.instances;
  std::vector<double> r1(n), r2(n), r3(n);
  std::vector<std::uint64_t> seeds(n);
  parallel_for(n, o.threads, [&](std::size_t i) {
    seeds[i] = mix_seed(o.seed ^ 0x6f6d6567ULL, i);
    Rng rng(seeds[i]);
    const std::size_t sizes[] = {2, 3, 5};
    const std::size_t dim = 1 + rng() % 50;
    const std::size_t T = sizes[i % 3];
    ParamLayout layout;
    layout.append("w", {dim}, EntryKind::BackboneWeight);
    ParamVector f(layout);
    for (auto& x : f.values()) x = uniform(rng, 0.0, 2.0);
    const FisherDiagonal fisher(f, 1);
    std::vector<ParamVector> taus;
    for (std::size_t t = 0; t < T; ++t) taus.push_back(random_params(layout, rng));
    const auto w = random_weights(T, rng);
    const double expanded = omega_value(taus, w, fisher);
    const double pairwise = omega_pairwise(taus, w, fisher);
    r1[i] = std::abs(expanded - pairwise) / std::max(std::abs(pairwise), 1e-300);

    // (1-beta) l(P) + beta sum w l(t) = l(P) + beta Omega on the Fisher proxy.
    const auto q = QuadraticProxy::diagonal(gauss(rng), randn(Eigen::Index(dim), rng), to_eigen(f));
    std::vector<Vector> dense;
    for (const auto& t : taus) dense.push_back(to_eigen(t));
    const double beta = uniform(rng, 0.0, 1.0);
    const double scale = std::max(1.0, std::abs(q.eval(combine(dense, w)) + beta * omega_quadratic(q, dense, w)));
    r2[i] = std::abs(interpolation_residual(q, dense, w, beta)) / scale;

    // Collapsing every vector onto the common mean removes the barrier.
    ParamVector avg(layout);
    for (const auto& t : taus) avg.add_scaled(t, 1.0 / double(T));
    const std::vector<ParamVector> same(T, avg);
    r3[i] = std::abs(omega_value(same, w, fisher)) / std::max(1.0, ewc_penalty(avg, fisher));
  });
  for (std::size_t i = 0; i < n; ++i) {
    forms.record(r1[i], seeds[i]);
    interp.record(r2[i], seeds[i]);
    mean.record(r3[i], seeds[i]);
  }
  return {forms, interp, mean};
}

// ---------------------------------------------------------------- gradients

struct Adapter {
  Variant variant;
  std::size_t rank;
  const char* name;
};

constexpr Adapter kAdapters[] = {{Variant::FFT, 0, "FFT"},
                                 {Variant::LoRA, 1, "LoRA-r1"},
                                 {Variant::LoRA, 2, "LoRA-r2"},
                                 {Variant::LoRA, 4, "LoRA-r4"},
                                 {Variant::IA3, 0, "IA3"}};

NetSpec grad_net_spec() {
  NetSpec ns;
  ns.input_dim = 3;
  ns.hidden = {4, 3};
  ns.head_dims = {2, 3};
  return ns;
}

// Central differences of `f` over the adapter parameters of `tv`.
std::vector<double> fd_adapter(const TaskVector& tv, const std::function<double(const TaskVector&)>& f) {
  TaskVector work = tv;
  std::vector<double> out(tv.num_params());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = tv.params()[i];
    const double h = 1e-5 * std::max(1.0, std::abs(x));
    work.mutable_params()[i] = x + h;
    const double up = f(work);
    work.mutable_params()[i] = x - h;
    const double down = f(work);
    work.mutable_params()[i] = x;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 1e-12;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

std::vector<VerificationReport> suite_gradients(const Options& o) {
  const Network net(grad_net_spec());
  const ParamLayout layout = net.layout();
  const std::size_t per = std::max<std::size_t>(1, o.instances / 2);  // 50 at the default
  const std::size_t ks[] = {1, 2, 3, 5};

  std::vector<VerificationReport> reps;
  for (const auto& ad : kAdapters) {
    auto ewc_rep = make(std::string("gradients-ewc-") + ad.name, 1e-5);
    auto omega_rep = make(std::string("gradients-omega-") + ad.name, 1e-5);
    const std::size_t n = per * 4;
    std::vector<double> re(n), ro(n);
    std::vector<std::uint64_t> seeds(n);
    parallel_for(n, o.threads, [&](std::size_t i) {
      const std::size_t k = ks[i % 4];
      seeds[i] = mix_seed(o.seed ^ (0x67726164ULL + std::uint64_t(&ad - kAdapters)), i);
      Rng rng(seeds[i]);
      const ParamVector theta0 = random_params(layout, rng, 0.7);
      ParamVector fv(layout);
      for (auto& x : fv.values()) x = uniform(rng, 0.0, 1.0);
      const FisherDiagonal fisher(fv, 10);
      const ParamVector mask = strength_mask(layout, uniform(rng, 0.5, 2.0), uniform(rng, 0.5, 2.0));
      ParamVector masked_f = fv;
      for (std::size_t j = 0; j < masked_f.size(); ++j) masked_f[j] *= mask[j];
      const FisherDiagonal fisher_m(masked_f, 10);

      AdapterOptions ao;
      ao.rank = std::max<std::size_t>(1, ad.rank);
      ao.seed = seeds[i];
      TaskVector tv = TaskVector::zeros(ad.variant, layout, ao);
      for (auto& x : tv.mutable_params()) x = (ad.variant == Variant::IA3 ? 1.0 : 0.0) + 0.5 * gauss(rng);

      const auto g_ewc = ewc_grad(tv, fisher, theta0, &mask);
      const auto fd_ewc = fd_adapter(tv, [&](const TaskVector& v) { return 0.5 * ewc_penalty(v, fisher_m, theta0); });
      re[i] = rel_err(g_ewc, fd_ewc);

      std::vector<ParamVector> taus;
      ParamVector sum_prev(layout);
      for (std::size_t t = 1; t < k; ++t) {
        taus.push_back(random_params(layout, rng, 0.5));
        sum_prev += taus.back();
      }
      const std::vector<double> w(k, 1.0 / double(k));
      const auto g_om = omega_grad_current(tv, sum_prev, k, fisher, theta0, &mask);
      const auto fd_om = fd_adapter(tv, [&](const TaskVector& v) {
        auto all = taus;
        all.push_back(v.materialize(theta0));
        return omega_value(all, w, fisher_m);
      });
      ro[i] = rel_err(g_om, fd_om);
    });
    for (std::size_t i = 0; i < n; ++i) {
      ewc_rep.record(re[i], seeds[i]);
      omega_rep.record(ro[i], seeds[i]);
    }
    reps.push_back(ewc_rep);
    reps.push_back(omega_rep);
  }

  // Network gradient, Hessian and the 1/t factor of the composed forward pass.
  auto net_rep = make("gradients-network", 1e-6);
  auto hess_rep = make("hessian", 1e-5);
  auto scale_rep = make("gradients-composition-scale", 1e-6);
  const std::size_t m = std::max<std::size_t>(1, o.instances / 10);
  std::vector<double> rn(m), rh(m), rs(m);
  std::vector<std::uint64_t> seeds(m);
  parallel_for(m, o.threads, [&](std::size_t i) {
    seeds[i] = mix_seed(o.seed ^ 0x6e6574ULL, i);
    Rng rng(seeds[i]);
    const ParamVector theta = random_params(layout, rng, 0.7);
    const ClassRange range = i % 2 ? ClassRange{2, 5} : ClassRange{0, 5};
    const Batch batch = random_batch(12, 3, range, rng);
    const LossGrad lg = net.loss_and_grad(theta, batch, range);
    std::vector<double> ga, gf;
    for (int s = 0; s < 20; ++s) {
      const std::size_t j = rng() % theta.size();
      const double h = 1e-5 * std::max(1.0, std::abs(theta[j]));
      ParamVector up = theta, down = theta;
      up[j] += h;
      down[j] -= h;
      ga.push_back(lg.grad[j]);
      gf.push_back((net.loss(up, batch, range) - net.loss(down, batch, range)) / (2.0 * h));
    }
    rn[i] = rel_err(ga, gf);

    // Hessian against second differences of the loss values.
    const Eigen::MatrixXd hess = exact_hessian(net, theta, batch, range);
    const auto p = Eigen::Index(theta.size());
    Eigen::MatrixXd oracle(p, p);
    const double h = 1e-4;
    auto eval = [&](Eigen::Index a, double da, Eigen::Index b, double db) {
      ParamVector x = theta;
      x[std::size_t(a)] += da;
      x[std::size_t(b)] += db;
      return net.loss(x, batch, range);
    };
    for (Eigen::Index a = 0; a < p; ++a)
      for (Eigen::Index b = a; b < p; ++b) {
        const double v = (eval(a, h, b, h) - eval(a, h, b, -h) - eval(a, -h, b, h) + eval(a, -h, b, -h)) / (4 * h * h);
        oracle(a, b) = oracle(b, a) = v;
      }
    rh[i] = (hess - oracle).cwiseAbs().maxCoeff() / std::max(1e-12, hess.cwiseAbs().maxCoeff());

    // d/dtau loss(base + tau/t) = (1/t) grad loss at the composed point.
    const std::size_t t = 1 + rng() % 5;
    const ParamVector base = random_params(layout, rng, 0.7);
    const ParamVector tau = random_params(layout, rng, 0.3);
    ParamVector composed = base;
    composed.add_scaled(tau, 1.0 / double(t));
    const LossGrad at = net.loss_and_grad(composed, batch, range);
    std::vector<double> sa, sf;
    for (int s = 0; s < 20; ++s) {
      const std::size_t j = rng() % tau.size();
      const double hh = 1e-5 * std::max(1.0, std::abs(tau[j]));
      auto f = [&](double d) {
        ParamVector tt = tau;
        tt[j] += d;
        ParamVector x = base;
        x.add_scaled(tt, 1.0 / double(t));
        return net.loss(x, batch, range);
      };
      sa.push_back(at.grad[j] / double(t));
      sf.push_back((f(hh) - f(-hh)) / (2.0 * hh));
    }
    rs[i] = rel_err(sa, sf);
  });
  for (std::size_t i = 0; i < m; ++i) {
    net_rep.record(rn[i], seeds[i]);
    hess_rep.record(rh[i], seeds[i]);
    scale_rep.record(rs[i], seeds[i]);
  }
  reps.push_back(net_rep);
  reps.push_back(hess_rep);
  reps.push_back(scale_rep);
  return reps;
}

// ---------------------------------------------------------------- fisher / kl

// Linear softmax model fitted to labels drawn from a random teacher, so the
// risk has a finite minimiser.
struct ToyModel {
  Network net;
  ParamVector theta;
  Batch data;
  ClassRange range;
  double grad_norm = 0.0;
};

ToyModel toy_softmax(std::uint64_t seed) {
  Rng rng(seed);
  NetSpec ns;
  ns.input_dim = 4;
  ns.head_dims = {3};
  ToyModel m{Network(ns), {}, {}, {0, 3}};
  m.theta = m.net.init(seed);
  const ParamVector teacher = random_params(m.theta.layout(), rng, 1.0);
  m.data = random_batch(80, 4, m.range, rng);
  const Matrix logits = m.net.forward(teacher, m.data.inputs);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    std::vector<double> p(3);
    for (int c = 0; c < 3; ++c) p[std::size_t(c)] = std::exp(logits(i, c));
    m.data.labels[std::size_t(i)] = int(std::discrete_distribution<int>(p.begin(), p.end())(rng));
  }
  // Newton steps on the convex risk; the Hessian is small enough to factor.
  for (int it = 0; it < 30; ++it) {
    const LossGrad lg = m.net.loss_and_grad(m.theta, m.data, m.range);
    const Eigen::MatrixXd fim = full_fisher(m.net, m.theta, m.data, m.range);
    const auto n = fim.rows();
    const Vector step = (fim + 1e-10 * Eigen::MatrixXd::Identity(n, n)).ldlt().solve(to_eigen(lg.grad));
    for (Eigen::Index j = 0; j < n; ++j) m.theta[std::size_t(j)] -= step(j);
  }
  m.grad_norm = m.net.loss_and_grad(m.theta, m.data, m.range).grad.norm();
  return m;
}

std::vector<VerificationReport> suite_fisher(const Options& o) {
  auto diag_rep = make("fisher-diagonal", 1e-8);
  auto hess_rep = make("fisher-hessian", 1e-6);
  auto nonneg = make("fisher-nonnegative", 0.0);
  auto psd = make("hessian-psd-at-minimum", 1e-8);
  for (std::uint64_t i = 0; i < 3; ++i) {
    const std::uint64_t seed = mix_seed(o.seed ^ 0x66697368ULL, i);
    Rng rng(seed);
    // Diagonal consistency on a small tanh network with two heads.
    NetSpec ns;
    ns.input_dim = 5;
    ns.hidden = {6};
    ns.head_dims = {2, 3};
    const Network net(ns);
    const ParamVector theta = random_params(net.layout(), rng, 0.8);
    const ClassRange range{2, 5};
    const Batch data = random_batch(25, 5, range, rng);
    const FisherDiagonal f = local_fisher(net, theta, data, range);
    const Vector full = full_fisher(net, theta, data, range).diagonal();
    const Vector diag = to_eigen(f.values());
    diag_rep.record(max_abs_diff(diag, full) / std::max(1e-300, full.cwiseAbs().maxCoeff()), seed);
    nonneg.record(std::max(0.0, -diag.minCoeff()), seed);

    // Fisher equals the Hessian at the minimum of a linear-softmax model.
    const ToyModel toy = toy_softmax(seed);
    const Vector fh = to_eigen(local_fisher(toy.net, toy.theta, toy.data, toy.range).values());
    const Eigen::MatrixXd hess = exact_hessian(toy.net, toy.theta, toy.data, toy.range);
    const Vector hh = hess.diagonal();
    psd.record(std::max(0.0, -Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(hess).eigenvalues().minCoeff()), seed);
    hess_rep.record(max_abs_diff(fh, hh) / hh.cwiseAbs().maxCoeff(), seed);
    hess_rep.details["gradient_norm_at_minimum"].push_back(toy.grad_norm);
  }
  return {diag_rep, hess_rep, nonneg, psd};
}

const std::vector<double> kEpsilons = {1e-1, 3e-2, 1e-2, 3e-3, 1e-3};

std::vector<VerificationReport> suite_kl(const Options& o) {
  auto slope_rep = make("kl-slope", 0.0);
  auto ratio_rep = make("kl-ratio", 0.1);
  auto proxy_rep = make("proxy-fidelity", 0.0);
  const std::uint64_t seed = mix_seed(o.seed ^ 0x6b6cULL, 0);
  Rng rng(seed);

  const ToyModel toy = toy_softmax(seed);
  const ParamVector tau = random_params(toy.theta.layout(), rng, 1.0);
  const auto rows = kl_quadratic_check(toy.net, toy.theta, tau, toy.data, toy.range, kEpsilons);
  std::vector<double> eps, rem;
  for (const auto& r : rows) {
    eps.push_back(r.eps);
    rem.push_back(std::abs(r.kl - r.quad));
    slope_rep.details["table"].push_back({{"eps", r.eps}, {"kl", r.kl}, {"quad", r.quad}, {"ratio", r.ratio}});
  }
  const double slope = loglog_slope(eps, rem);
  slope_rep.details["slope"] = slope;
  slope_rep.record(std::max(0.0, 2.7 - slope), seed);
  ratio_rep.record(std::abs(rows.back().ratio - 1.0), seed);

  // Remainder of the exact-Hessian Taylor proxy on a smooth tanh network.
  NetSpec ns;
  ns.input_dim = 4;
  ns.hidden = {5};
  ns.head_dims = {3};
  const Network net(ns);
  const ParamVector theta0 = random_params(net.layout(), rng, 0.8);
  const ClassRange range{0, 3};
  const Batch data = random_batch(30, 4, range, rng);
  const LossGrad lg = net.loss_and_grad(theta0, data, range);
  const auto q = QuadraticProxy::dense(lg.loss, to_eigen(lg.grad), exact_hessian(net, theta0, data, range));
  const ParamVector dir = random_params(theta0.layout(), rng, 1.0);
  std::vector<double> prem;
  for (double e : kEpsilons) {
    ParamVector moved = theta0;
    moved.add_scaled(dir, e);
    prem.push_back(std::abs(net.loss(moved, data, range) - q.eval(e * to_eigen(dir))));
  }
  const double pslope = loglog_slope(eps, prem);
  proxy_rep.details["slope"] = pslope;
  proxy_rep.record(std::max(0.0, 2.7 - pslope), seed);
  return {slope_rep, ratio_rep, proxy_rep};
}

// ---------------------------------------------------------------- runs

struct SmallRun {
  TaskStream stream;
  Network net;
  ParamVector theta0;
  TrainConfig cfg;
};

SmallRun small_run(std::uint64_t seed, Algo algo, Variant variant) {
  BlobOptions bo;
  bo.tasks = 5;
  bo.classes_per_task = 2;
  bo.dim = 6;
  bo.samples_per_class = 30;
  bo.mean_scale = 1.5;
  bo.seed = seed;
  NetSpec ns;
  ns.input_dim = bo.dim;
  ns.hidden = {8};
  Network net(ns);
  TrainConfig cfg;
  cfg.algo = algo;
  cfg.variant = variant;
  cfg.rank = 2;
  cfg.lr = 0.05;
  cfg.epochs = 2;
  cfg.pre_epochs = 2;
  cfg.mog_components = 2;
  cfg.mog_samples = 16;
  cfg.align_epochs = 1;
  cfg.seed = seed;
  cfg.reg.alpha = cfg.reg.beta = 1.0;
  cfg.reg.alpha_cls = cfg.reg.beta_cls = 1.0;
  ParamVector theta0 = net.init(seed);
  return {gen_blobs(bo), std::move(net), std::move(theta0), cfg};
}

std::size_t pool_mismatches(const Learner& a, const Learner& b) {
  std::size_t bad = bit_mismatches(a.theta0().values(), b.theta0().values());
  bad += bit_mismatches(a.fisher.values().values(), b.fisher.values().values());
  if (a.pool.count() != b.pool.count()) return bad + 1;
  for (std::size_t i = 0; i < a.pool.count(); ++i)
    bad += bit_mismatches(a.pool.vectors()[i].params(), b.pool.vectors()[i].params());
  bad += bit_mismatches(a.pool.compose().values(), b.pool.compose().values());
  return bad;
}

std::vector<VerificationReport> suite_o1(const Options& o) {
  auto rep = make("o1-equality", 0.0);
  for (Variant v : {Variant::FFT, Variant::LoRA, Variant::IA3}) {
    auto run = small_run(o.seed, Algo::IEL, v);
    run.cfg.cached_base = true;
    const auto cached = run_sequence(run.stream, run.net, run.theta0, run.cfg);
    run.cfg.cached_base = false;
    const auto explicit_sum = run_sequence(run.stream, run.net, run.theta0, run.cfg);
    const double bad = double(pool_mismatches(cached.learner, explicit_sum.learner));
    rep.details[std::string(to_string(v))] = bad;
    rep.record(bad, o.seed);
  }
  return {rep};
}

// Bit mismatches between two runs: pools, accuracy matrices, risks, losses.
std::size_t run_mismatches(const RunOutput& x, const RunOutput& y) {
  std::size_t bad = pool_mismatches(x.learner, y.learner);
  for (std::size_t k = 0; k < x.result.acc.tasks(); ++k)
    for (std::size_t t = 0; t <= k; ++t)
      bad += std::bit_cast<std::uint64_t>(x.result.acc.at(k, t)) != std::bit_cast<std::uint64_t>(y.result.acc.at(k, t));
  for (std::size_t k = 0; k < x.result.risk.size(); ++k) {
    const auto& p = x.result.risk[k];
    const auto& q = y.result.risk[k];
    const double lhs[] = {p.composed, p.individual_mean, p.theta0, p.proxy_composed, p.proxy_individual_mean};
    const double rhs[] = {q.composed, q.individual_mean, q.theta0, q.proxy_composed, q.proxy_individual_mean};
    bad += bit_mismatches(lhs, rhs);
    bad += bit_mismatches(x.result.tasks[k].epoch_loss, y.result.tasks[k].epoch_loss);
  }
  return bad;
}

std::vector<VerificationReport> suite_determinism(const Options& o) {
  auto run_rep = make("determinism-run", 0.0);
  auto par_rep = make("determinism-parallel-tasks", 0.0);
  auto data_rep = make("determinism-data", 0.0);
  for (Algo a : {Algo::ITA, Algo::IEL}) {
    const auto run = small_run(o.seed, a, Variant::LoRA);
    const auto x = run_sequence(run.stream, run.net, run.theta0, run.cfg);
    const auto y = run_sequence(run.stream, run.net, run.theta0, run.cfg);
    const std::size_t bad = run_mismatches(x, y);
    run_rep.details[std::string(to_string(a))] = bad;
    run_rep.record(double(bad), o.seed);
  }
  // Concurrent individual training against per-task snapshots.
  for (Variant v : {Variant::FFT, Variant::LoRA, Variant::IA3}) {
    auto run = small_run(o.seed, Algo::ITA, v);
    const auto x = run_sequence(run.stream, run.net, run.theta0, run.cfg);
    run.cfg.parallel_tasks = true;
    run.cfg.threads = std::max<std::size_t>(2, o.threads);
    const auto y = run_sequence(run.stream, run.net, run.theta0, run.cfg);
    const std::size_t bad = run_mismatches(x, y);
    par_rep.details[std::string(to_string(v))] = bad;
    par_rep.record(double(bad), o.seed);
  }
  BlobOptions bo;
  bo.seed = o.seed;
  const auto s1 = gen_blobs(bo);
  const auto s2 = gen_blobs(bo);
  std::size_t bad = 0;
  for (std::size_t t = 0; t < s1.num_tasks(); ++t)
    for (auto part : {&TaskData::train, &TaskData::val, &TaskData::test}) {
      const Batch& a = s1.tasks[t].*part;
      const Batch& b = s2.tasks[t].*part;
      bad += bit_mismatches({a.inputs.data(), std::size_t(a.inputs.size())}, {b.inputs.data(), std::size_t(b.inputs.size())});
      bad += a.labels != b.labels;
    }
  data_rep.record(double(bad), o.seed);
  return {run_rep, par_rep, data_rep};
}

// ---------------------------------------------------------------- composition

std::vector<VerificationReport> suite_composition(const Options& o) {
  auto lin = make("composition-linearity", 1e-12);
  auto uni = make("composition-uniform", 1e-12);
  auto spec = make("specialize-all", 1e-12);
  auto unl = make("unlearn-consistency", 1e-12);
  auto frozen = make("frozen-past", 0.0);
  auto base_rep = make("cumulative-base", 1e-10);
  auto idem = make("materialize-idempotent", 0.0);
  const Network net(grad_net_spec());
  const std::size_t n = std::max<std::size_t>(1, o.instances / 5);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = mix_seed(o.seed ^ 0x636f6d70ULL, i);
    Rng rng(seed);
    const ParamVector theta0 = random_params(net.layout(), rng, 0.7);
    Pool pool(theta0);
    const std::size_t T = 2 + rng() % 4;
    std::vector<Vector> dense;
    for (std::size_t t = 0; t < T; ++t) {
      const auto& ad = kAdapters[rng() % 5];
      AdapterOptions ao;
      ao.rank = std::max<std::size_t>(1, ad.rank);
      ao.seed = seed + t;
      TaskVector tv = TaskVector::zeros(ad.variant, theta0.layout(), ao);
      for (auto& x : tv.mutable_params()) x = (ad.variant == Variant::IA3 ? 1.0 : 0.0) + 0.3 * gauss(rng);
      dense.push_back(to_eigen(tv.materialize(theta0)));
      pool.add(std::move(tv));
    }
    const Vector t0 = to_eigen(theta0);
    const double scale = std::max(1.0, t0.cwiseAbs().maxCoeff());
    const auto w = random_weights(T, rng);
    lin.record(max_abs_diff(to_eigen(pool.compose(w)), t0 + combine(dense, w)) / scale, seed);
    const std::vector<double> u(T, 1.0 / double(T));
    uni.record(max_abs_diff(to_eigen(pool.compose()), t0 + combine(dense, u)) / scale, seed);
    std::vector<int> ids;
    for (int id = 1; id <= int(T); ++id) ids.push_back(id);
    spec.record(max_abs_diff(to_eigen(pool.specialize(ids)), to_eigen(pool.compose())) / scale, seed);
    const int drop = 1 + int(rng() % T);
    std::vector<Vector> rest;
    for (int id = 1; id <= int(T); ++id)
      if (id != drop) rest.push_back(dense[std::size_t(id - 1)]);
    const std::vector<double> ru(T - 1, 1.0 / double(T - 1));
    double dev = max_abs_diff(to_eigen(pool.unlearn(drop)), t0 + combine(rest, ru));
    dev = std::max(dev, max_abs_diff(to_eigen(pool.unlearn(drop, UnlearnMode::Subtract)),
                                     t0 + combine(dense, u) - dense[std::size_t(drop - 1)] / double(T)));
    unl.record(dev / scale, seed);

    // theta0 + cum/T + tau_T/T is the uniform composition of all T vectors.
    Pool head_pool(theta0);
    for (std::size_t t = 0; t + 1 < T; ++t) head_pool.add(pool.vectors()[t]);
    Vector via_base = to_eigen(head_pool.cumulative_base(T)) + dense.back() / double(T);
    base_rep.record(max_abs_diff(via_base, to_eigen(pool.compose())) / scale, seed);

    std::size_t bad = 0;
    for (const auto& tv : pool.vectors()) {
      TaskVector fresh = TaskVector::from_parts(tv.variant(), tv.rank(), tv.layout(), tv.blocks(),
                                                {tv.params().begin(), tv.params().end()});
      bad += bit_mismatches(fresh.materialize(theta0).values(), fresh.materialize(theta0).values());
      bad += bit_mismatches(fresh.materialize(theta0).values(), tv.materialize(theta0).values());
    }
    idem.record(double(bad), seed);
  }

  // Past vectors stay bit-identical while later tasks are trained.
  const auto run = small_run(o.seed, Algo::ITA, Variant::IA3);
  std::vector<std::vector<double>> snapshots;
  std::size_t bad = 0;
  run_sequence(run.stream, run.net, run.theta0, run.cfg, [&](const Learner& l, std::size_t t, const TaskStream&) {
    for (std::size_t k = 0; k < snapshots.size(); ++k) {
      const auto now = l.pool.displacement(int(k + 1));
      bad += bit_mismatches(snapshots[k], now.values().subspan(0, snapshots[k].size()));
    }
    const auto& tv = l.pool.vector(int(t));
    const auto d = l.pool.displacement(int(t));
    snapshots.emplace_back(d.values().begin(), d.values().begin() + std::ptrdiff_t(tv.layout().total_len()));
  });
  frozen.record(double(bad), o.seed);
  return {lin, uni, spec, unl, frozen, base_rep, idem};
}

// ---------------------------------------------------------------- masking

std::vector<VerificationReport> suite_masking(const Options& o) {
  auto ce = make("masking-local-ce", 0.0);
  auto strength = make("masking-strength", 0.0);
  NetSpec ns = grad_net_spec();
  ns.head_dims = {2, 3, 2};
  const Network net(ns);
  const auto& layout = net.layout();
  const std::size_t n = std::max<std::size_t>(1, o.instances / 5);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = mix_seed(o.seed ^ 0x6d61736bULL, i);
    Rng rng(seed);
    const ParamVector theta = random_params(layout, rng, 0.7);
    const ClassRange range = head_range(layout, 2);
    const Batch batch = random_batch(10, 3, range, rng);
    ParamVector other = theta;
    for (std::size_t e = 0; e < layout.num_entries(); ++e) {
      const auto& entry = layout.entry(e);
      if (entry.is_head() && entry.task_id != 2)
        for (auto& x : other.entry(e)) x += 10.0 * gauss(rng);
    }
    const LossGrad a = net.loss_and_grad(theta, batch, range);
    const LossGrad b = net.loss_and_grad(other, batch, range);
    double dev = std::abs(a.loss - b.loss);
    for (std::size_t j = 0; j < a.grad.size(); ++j) dev = std::max(dev, std::abs(a.grad[j] - b.grad[j]));
    for (std::size_t e = 0; e < layout.num_entries(); ++e) {
      const auto& entry = layout.entry(e);
      if (entry.is_head() && entry.task_id != 2)
        for (double g : a.grad.entry(e)) dev = std::max(dev, std::abs(g));
    }
    ce.record(dev, seed);

    // Zero strength on one side of the mask zeroes that side's gradient.
    ParamVector fv(layout);
    for (auto& x : fv.values()) x = uniform(rng, 0.1, 1.0);
    const FisherDiagonal fisher(fv, 1);
    const ParamVector tau = random_params(layout, rng);
    const ParamVector body_only = strength_mask(layout, 1.0, 0.0);
    const ParamVector head_only = strength_mask(layout, 0.0, 1.0);
    const ParamVector gb = ewc_grad_dense(tau, fisher, &body_only);
    const ParamVector gh = ewc_grad_dense(tau, fisher, &head_only);
    double leak = 0.0;
    for (std::size_t e = 0; e < layout.num_entries(); ++e) {
      const auto& zero_side = layout.entry(e).is_head() ? gb : gh;
      for (double g : zero_side.entry(e)) leak = std::max(leak, std::abs(g));
    }
    strength.record(leak, seed);
  }
  return {ce, strength};
}

// ---------------------------------------------------------------- accumulation

std::vector<VerificationReport> suite_accumulation(const Options& o) {
  auto order = make("accumulation-order", 1e-12);
  auto hand = make("accumulation-weighted-mean", 1e-15);
  const std::size_t n = std::max<std::size_t>(1, o.instances / 5);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = mix_seed(o.seed ^ 0x61636375ULL, i);
    Rng rng(seed);
    ParamLayout layout;
    layout.append("w", {1 + rng() % 40}, EntryKind::BackboneWeight);
    const std::size_t T = 2 + rng() % 6;
    std::vector<FisherDiagonal> locals;
    for (std::size_t t = 0; t < T; ++t) {
      ParamVector v(layout);
      for (auto& x : v.values()) x = uniform(rng, 0.0, 5.0);
      locals.emplace_back(v, 1 + rng() % 500);
    }
    std::vector<std::size_t> perm(T);
    for (std::size_t t = 0; t < T; ++t) perm[t] = t;
    std::shuffle(perm.begin(), perm.end(), rng);
    double dev = 0.0;
    for (auto mode : {AccumulateMode::WeightedMean, AccumulateMode::Sum}) {
      FisherDiagonal a, b;
      for (std::size_t t = 0; t < T; ++t) {
        a = accumulate(a, locals[t], locals[t].sample_count(), mode);
        b = accumulate(b, locals[perm[t]], locals[perm[t]].sample_count(), mode);
      }
      const Vector va = to_eigen(a.values());
      const Vector vb = to_eigen(b.values());
      dev = std::max(dev, max_abs_diff(va, vb) / std::max(1e-300, va.cwiseAbs().maxCoeff()));
      if (va.minCoeff() < 0.0) dev = std::numeric_limits<double>::infinity();
      if (a.sample_count() != b.sample_count()) dev = std::numeric_limits<double>::infinity();
    }
    order.record(dev, seed);
  }
  ParamLayout one;
  one.append("w", {1}, EntryKind::BackboneWeight);
  FisherDiagonal g;
  g = accumulate(g, FisherDiagonal(ParamVector(one, {1.0}), 100), 100);
  g = accumulate(g, FisherDiagonal(ParamVector(one, {3.0}), 300), 300);
  hand.details["value"] = g.values()[0];
  hand.record(std::abs(g.values()[0] - 2.5), o.seed);
  return {order, hand};
}

using SuiteFn = std::vector<VerificationReport> (*)(const Options&);

const std::vector<std::pair<std::string, SuiteFn>>& registry() {
  static const std::vector<std::pair<std::string, SuiteFn>> r = {
      {"decomposition", suite_decomposition},         {"jensen", suite_jensen},
      {"omega-forms", suite_omega_forms},   {"gradients", suite_gradients},
      {"fisher", suite_fisher},             {"kl", suite_kl},
      {"o1", suite_o1},                     {"composition", suite_composition},
      {"masking", suite_masking},           {"accumulation", suite_accumulation},
      {"determinism", suite_determinism},
  };
  return r;
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, fn] : registry()) out.push_back(name);
    return out;
  }();
  return names;
}

std::vector<VerificationReport> run_suite(const std::string& name, const Options& options) {
  std::vector<VerificationReport> out;
  for (const auto& [n, fn] : registry()) {
    if (name != "all" && name != n) continue;
    auto reps = fn(options);
    out.insert(out.end(), reps.begin(), reps.end());
  }
  if (out.empty()) throw ValidationError("unknown verification suite '" + name + "'");
  return out;
}

}  // namespace taskvec::verify
