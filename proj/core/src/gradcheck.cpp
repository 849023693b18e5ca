#include "arcd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "arcd/arch.hpp"
#include "arcd/loss.hpp"
#include "arcd/ops.hpp"

namespace arcd {

bool GradcheckReport::passed() const {
  return sampled && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

double GradcheckReport::max_rel_error() const {
  double m = 0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

namespace {

struct Probe {
  double value;
  std::vector<std::uint8_t> signs;
};

Probe probe(const GradcheckCase& c, std::span<const double> r) {
  KinkMonitor monitor;
  double v;
  {
    KinkMonitorScope scope(monitor);
    NoGradGuard guard;
    v = weighted_sum(c.forward(), r).item();
  }
  return {v, std::move(monitor.signs)};
}

}  // namespace

GradcheckReport gradcheck(const std::string& name, const CaseFactory& factory, std::uint64_t seed,
                          const GradcheckOptions& options) {
  GradcheckReport report;
  report.name = name;
  report.tolerance = options.tolerance;

  for (int attempt = 0; attempt <= options.max_resamples; ++attempt) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(attempt));
    GradcheckCase c = factory(rng);

    KinkMonitor base_monitor;
    Tensor<double> loss;
    std::vector<double> r;
    {
      KinkMonitorScope scope(base_monitor);
      auto out = c.forward();
      r.resize(static_cast<std::size_t>(out.numel()));
      for (auto& v : r) v = rng.uniform(-1, 1);
      loss = weighted_sum(out, std::span<const double>(r));
    }
    if (options.kink_margin > 0 && base_monitor.min_abs < options.kink_margin) {
      ++report.resamples;
      continue;
    }
    backward(loss);

    // A perturbation that flips a relu crosses a kink; that coordinate is
    // skipped and another drawn. The draw is abandoned if an input runs out.
    std::vector<GradcheckEntry> entries;
    bool exhausted = false;
    for (auto& in : c.inputs) {
      GradcheckEntry e;
      e.input = in.name;
      std::vector<double> analytic(static_cast<std::size_t>(in.value.numel()), 0.0);
      if (in.value.has_grad()) std::copy(in.value.grad().begin(), in.value.grad().end(), analytic.begin());
      auto x = in.value.mutable_data();
      std::vector<std::int64_t> shuffled(static_cast<std::size_t>(in.value.numel()));
      std::iota(shuffled.begin(), shuffled.end(), 0);
      for (std::size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
      const std::int64_t want = options.coordinates > 0 ? std::min<std::int64_t>(options.coordinates, in.value.numel())
                                                         : in.value.numel();
      for (auto i : shuffled) {
        if (e.checked == want) break;
        const double orig = x[i];
        x[i] = orig + options.step;
        auto plus = probe(c, r);
        x[i] = orig - options.step;
        auto minus = probe(c, r);
        x[i] = orig;
        if (plus.signs != base_monitor.signs || minus.signs != base_monitor.signs) {
          ++e.skipped;
          continue;
        }
        const double numeric = (plus.value - minus.value) / (2 * options.step);
        const double a = analytic[static_cast<std::size_t>(i)];
        const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
        const double rel = std::abs(a - numeric) / denom;
        if (rel >= e.max_rel_error) {
          e.max_rel_error = rel;
          e.worst_analytic = a;
          e.worst_numeric = numeric;
        }
        ++e.checked;
      }
      if (e.checked == 0 || (options.coordinates == 0 && e.skipped > 0)) {
        exhausted = true;
        break;
      }
      e.passed = e.max_rel_error < options.tolerance;
      entries.push_back(std::move(e));
    }
    if (exhausted) {
      ++report.resamples;
      continue;
    }
    report.entries = std::move(entries);
    report.sampled = true;
    return report;
  }
  return report;
}

std::string format_report(const GradcheckReport& report) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s %s max_rel_err=%.3e tol=%.0e resamples=%d\n", report.passed() ? "PASS" : "FAIL",
                report.name.c_str(), report.max_rel_error(), report.tolerance, report.resamples);
  out += buf;
  if (!report.sampled) out += "  no kink-free sample found\n";
  for (const auto& e : report.entries) {
    std::snprintf(buf, sizeof buf, "  %-40s %.3e  a=% .6e n=% .6e  (%lld coords, %lld skipped)%s\n", e.input.c_str(),
                  e.max_rel_error, e.worst_analytic, e.worst_numeric, static_cast<long long>(e.checked),
                  static_cast<long long>(e.skipped),
                  e.passed ? "" : "  <-- over tolerance");
    out += buf;
  }
  return out;
}

// --- suite -----------------------------------------------------------------

namespace {

using D = double;

Tensor<D> leaf(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  std::vector<D> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<D>(std::move(shape), std::move(v), true);
}

GradcheckCase unary(Rng& rng, Shape shape, std::function<Tensor<D>(const Tensor<D>&)> f, double lo = -1, double hi = 1) {
  auto x = leaf(rng, std::move(shape), lo, hi);
  return {{{"x", x}}, [x, f] { return f(x); }, nullptr};
}

GradcheckCase binary(Rng& rng, Shape a_shape, Shape b_shape,
                     std::function<Tensor<D>(const Tensor<D>&, const Tensor<D>&)> f) {
  auto a = leaf(rng, std::move(a_shape)), b = leaf(rng, std::move(b_shape));
  return {{{"a", a}, {"b", b}}, [a, b, f] { return f(a, b); }, nullptr};
}

void add_params(GradcheckCase& c, ParameterSet<D> set) {
  for (auto& p : set.params) c.inputs.push_back({p.name, p.value});
}

GradcheckOptions primitive() { return {}; }

// Network-sized losses carry ~1e-9 of finite-difference roundoff, so
// gradients below 1e-5 cannot be resolved to 1e-3 relative.
GradcheckOptions composite(int coordinates) {
  GradcheckOptions o;
  o.tolerance = 1e-3;
  o.floor = 1e-5;
  o.coordinates = coordinates;
  return o;
}

}  // namespace

std::vector<GradcheckSuiteEntry> gradcheck_suite() {
  std::vector<GradcheckSuiteEntry> s;
  auto prim = [&](std::string name, CaseFactory f, GradcheckOptions o = primitive()) {
    s.push_back({std::move(name), false, std::move(f), o});
  };
  auto comp = [&](std::string name, CaseFactory f, int coords) {
    s.push_back({std::move(name), true, std::move(f), composite(coords)});
  };

  prim("conv2d", [](Rng& rng) {
    auto x = leaf(rng, {2, 3, 6, 6}), w = leaf(rng, {4, 3, 3, 3}), b = leaf(rng, {4});
    return GradcheckCase{{{"x", x}, {"weight", w}, {"bias", b}}, [=] { return conv2d(x, w, b, 1, 1); }, nullptr};
  });
  prim("conv2d_stride2", [](Rng& rng) {
    auto x = leaf(rng, {2, 2, 7, 7}), w = leaf(rng, {3, 2, 3, 3}), b = leaf(rng, {3});
    return GradcheckCase{{{"x", x}, {"weight", w}, {"bias", b}}, [=] { return conv2d(x, w, b, 2, 1); }, nullptr};
  });
  prim("conv2d_1x1", [](Rng& rng) {
    auto x = leaf(rng, {2, 3, 4, 4}), w = leaf(rng, {2, 3, 1, 1}), b = leaf(rng, {2});
    return GradcheckCase{{{"x", x}, {"weight", w}, {"bias", b}}, [=] { return conv2d(x, w, b); }, nullptr};
  });
  prim("conv3d", [](Rng& rng) {
    auto x = leaf(rng, {1, 2, 2, 5, 5}), w = leaf(rng, {3, 2, 2, 3, 3}), b = leaf(rng, {3});
    return GradcheckCase{{{"x", x}, {"weight", w}, {"bias", b}},
                         [=] { return conv3d(x, w, b, {0, 1, 1}); }, nullptr};
  });
  prim("batch_norm_train", [](Rng& rng) {
    auto x = leaf(rng, {3, 2, 4, 4}), g = leaf(rng, {2}, 0.5, 1.5), b = leaf(rng, {2});
    auto stats = std::make_shared<RunningStats<D>>(2);
    return GradcheckCase{{{"x", x}, {"gamma", g}, {"beta", b}},
                         [=] { return batch_norm(x, g, b, *stats, NormMode::train); }, stats};
  });
  prim("batch_norm_eval", [](Rng& rng) {
    auto x = leaf(rng, {2, 3, 3, 3}), g = leaf(rng, {3}, 0.5, 1.5), b = leaf(rng, {3});
    auto stats = std::make_shared<RunningStats<D>>(3);
    for (auto& m : stats->mean) m = rng.uniform(-0.5, 0.5);
    for (auto& v : stats->var) v = rng.uniform(0.5, 2);
    return GradcheckCase{{{"x", x}, {"gamma", g}, {"beta", b}},
                         [=] { return batch_norm(x, g, b, *stats, NormMode::eval); }, stats};
  });
  prim("add", [](Rng& rng) { return binary(rng, {2, 3, 4}, {2, 3, 4}, [](auto& a, auto& b) { return add(a, b); }); });
  prim("sub", [](Rng& rng) { return binary(rng, {2, 3, 4}, {2, 3, 4}, [](auto& a, auto& b) { return sub(a, b); }); });
  prim("mul", [](Rng& rng) { return binary(rng, {2, 3, 4}, {2, 3, 4}, [](auto& a, auto& b) { return mul(a, b); }); });
  prim("add_scalar", [](Rng& rng) { return unary(rng, {5, 3}, [](auto& x) { return add_scalar(x, 0.7); }); });
  prim("mul_scalar", [](Rng& rng) { return unary(rng, {5, 3}, [](auto& x) { return mul_scalar(x, -1.3); }); });
  prim("one_minus", [](Rng& rng) { return unary(rng, {5, 3}, [](auto& x) { return one_minus(x); }); });
  {
    GradcheckOptions o;
    o.kink_margin = 1e-3;
    prim("relu", [](Rng& rng) { return unary(rng, {4, 3, 3}, [](auto& x) { return relu(x); }); }, o);
  }
  prim("sigmoid", [](Rng& rng) { return unary(rng, {4, 3, 3}, [](auto& x) { return sigmoid(x); }, -6, 6); });
  {
    GradcheckOptions o;
    o.tolerance = 1e-6;
    prim("sigmoid_chain", [](Rng& rng) {
      return unary(rng, {3, 4}, [](auto& x) { return sigmoid(mul_scalar(sigmoid(mul_scalar(sigmoid(x), 2.0)), 3.0)); });
    }, o);
  }
  prim("scale_channels", [](Rng& rng) {
    return binary(rng, {2, 3, 4, 4}, {2, 3}, [](auto& a, auto& b) { return scale_channels(a, b); });
  });
  prim("scale_pixels", [](Rng& rng) {
    return binary(rng, {2, 3, 4, 4}, {2, 1, 4, 4}, [](auto& a, auto& b) { return scale_pixels(a, b); });
  });
  prim("concat", [](Rng& rng) {
    return binary(rng, {2, 3, 2, 2}, {2, 1, 2, 2}, [](auto& a, auto& b) { return concat<D>({a, b}, 1); });
  });
  prim("reshape", [](Rng& rng) { return unary(rng, {2, 3, 4}, [](auto& x) { return reshape(x, Shape{6, 4}); }); });
  prim("upsample_bilinear_x2", [](Rng& rng) { return unary(rng, {2, 2, 3, 3}, [](auto& x) { return upsample_bilinear(x, 2); }); });
  prim("upsample_bilinear_x4", [](Rng& rng) { return unary(rng, {1, 2, 2, 3}, [](auto& x) { return upsample_bilinear(x, 4); }); });
  prim("upsample_nearest", [](Rng& rng) { return unary(rng, {2, 2, 3, 3}, [](auto& x) { return upsample_nearest(x, 2); }); });
  prim("global_avg_pool", [](Rng& rng) { return unary(rng, {2, 3, 4, 5}, [](auto& x) { return global_avg_pool(x); }); });
  prim("matvec", [](Rng& rng) {
    auto x = leaf(rng, {3, 5}), w = leaf(rng, {4, 5}), b = leaf(rng, {4});
    return GradcheckCase{{{"x", x}, {"weight", w}, {"bias", b}}, [=] { return matvec(x, w, b); }, nullptr};
  });
  prim("sum", [](Rng& rng) { return unary(rng, {3, 4}, [](auto& x) { return sum(x); }); });
  prim("mean", [](Rng& rng) { return unary(rng, {3, 4}, [](auto& x) { return mean(x); }); });
  prim("bce", [](Rng& rng) {
    auto p = leaf(rng, {2, 1, 4, 4}, 0.05, 0.95);
    auto g = Tensor<D>(Shape{2, 1, 4, 4});
    for (auto& v : g.mutable_data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return GradcheckCase{{{"p", p}}, [=] { return bce(p, g); }, nullptr};
  });
  prim("dice", [](Rng& rng) {
    auto p = leaf(rng, {2, 1, 4, 4}, 0.05, 0.95);
    auto g = Tensor<D>(Shape{2, 1, 4, 4});
    for (auto& v : g.mutable_data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return GradcheckCase{{{"p", p}}, [=] { return dice(p, g); }, nullptr};
  });

  for (bool gated : {true, false}) {
    comp(gated ? "fam" : "fam_without_gate", [gated](Rng& rng) {
      auto fam = std::make_shared<FeatureAggregation<D>>(6, 4, 5, gated, rng);
      auto hi = leaf(rng, {2, 6, 3, 3}), lo = leaf(rng, {2, 4, 6, 6});
      GradcheckCase c{{{"high", hi}, {"low", lo}}, [=] { return (*fam)(hi, lo, true); }, fam};
      ParameterSet<D> ps;
      fam->collect(ps, "fam");
      add_params(c, ps);
      return c;
    }, 12);
  }
  comp("tde", [](Rng& rng) {
    auto tde = std::make_shared<TemporalDifference<D>>(3, rng);
    auto a = leaf(rng, {2, 3, 4, 4}), b = leaf(rng, {2, 3, 4, 4});
    GradcheckCase c{{{"a", a}, {"b", b}}, [=] { return (*tde)(a, b, true); }, tde};
    ParameterSet<D> ps;
    tde->collect(ps, "tde");
    add_params(c, ps);
    return c;
  }, 12);
  comp("channel_attention", [](Rng& rng) {
    auto ca = std::make_shared<ChannelAttention<D>>(8, 4, rng);
    auto x = leaf(rng, {2, 8, 3, 3});
    GradcheckCase c{{{"x", x}}, [=] { return (*ca)(x); }, ca};
    ParameterSet<D> ps;
    ca->collect(ps, "ca");
    add_params(c, ps);
    return c;
  }, 12);
  comp("krm", [](Rng& rng) {
    auto krm = std::make_shared<KnowledgeReview<D>>(4, 6, 5, 4, true, true, rng);
    auto dl = leaf(rng, {2, 4, 8, 8}), dh = leaf(rng, {2, 6, 4, 4});
    auto pl = leaf(rng, {2, 1, 8, 8}, 0.05, 0.95), ph = leaf(rng, {2, 1, 4, 4}, 0.05, 0.95);
    GradcheckCase c{{{"d_low", dl}, {"d_high", dh}, {"p_low", pl}, {"p_high", ph}},
                    [=] {
                      auto r = (*krm)(dl, dh, pl, ph, true);
                      return concat<D>({r.features, r.probability}, 1);
                    },
                    krm};
    ParameterSet<D> ps;
    krm->collect(ps, "krm");
    add_params(c, ps);
    return c;
  }, 8);
  comp("oue", [](Rng& rng) {
    auto oue = std::make_shared<UncertaintyBranch<D>>(6, 4, true, rng);
    auto t1 = leaf(rng, {2, 3, 16, 16}, 0, 1), t2 = leaf(rng, {2, 3, 16, 16}, 0, 1), d2 = leaf(rng, {2, 6, 4, 4});
    GradcheckCase c{{{"t1", t1}, {"t2", t2}, {"d2", d2}},
                    [=] {
                      auto u = (*oue)(t1, t2, d2, true);
                      return concat<D>({reshape(u.features, Shape{u.features.numel()}),
                                        reshape(u.probability, Shape{u.probability.numel()})}, 0);
                    },
                    oue};
    ParameterSet<D> ps;
    oue->collect(ps, "oue");
    add_params(c, ps);
    return c;
  }, 6);
  comp("network_32x32", [](Rng& rng) {
    // full topology at reduced width keeps the relu count, and so the
    // chance of a perturbation crossing a kink, manageable
    ArchConfig narrow;
    narrow.channels = {4, 6, 8, 8};
    narrow.texture_channels = 4;
    narrow.review_channels = 4;
    narrow.se_reduction = 2;
    auto net = std::make_shared<ARCDNet<D>>(narrow, AblationConfig{}, rng.next());
    auto t1 = leaf(rng, {2, 3, 32, 32}, 0, 1), t2 = leaf(rng, {2, 3, 32, 32}, 0, 1);
    GradcheckCase c{{{"t1", t1}, {"t2", t2}},
                    [=] {
                      auto p = net->forward(t1, t2, true);
                      std::vector<Tensor<D>> maps{p.change, p.uncertainty};
                      for (auto& m : p.level_probabilities) maps.push_back(m);
                      for (auto& m : p.refined_probabilities) maps.push_back(m);
                      return concat<D>(maps, 1);
                    },
                    net};
    add_params(c, net->parameters());
    return c;
  }, 4);
  return s;
}

}  // namespace arcd
