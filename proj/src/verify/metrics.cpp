#include "sdl/verify.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sdl {

const MetricCell& VerificationReport::cell(const std::string& variable, Index lead) const {
  for (const MetricCell& c : cells)
    if (c.variable == variable && c.lead == lead) return c;
  throw std::out_of_range("VerificationReport: no cell for " + variable + " at lead " + std::to_string(lead));
}

double VerificationReport::ssr(const std::string& variable, Index lead) const {
  const MetricCell& c = cell(variable, lead);
  if (!c.ssr) {
    throw std::domain_error("SSR undefined for " + variable + " at lead " + std::to_string(lead) +
                            ": ensemble-mean RMSE is zero");
  }
  return *c.ssr;
}

nlohmann::json VerificationReport::to_json() const {
  nlohmann::json j;
  j["variables"] = variables;
  j["leads"] = leads;
  j["members"] = members;
  for (const MetricCell& c : cells) {
    nlohmann::json e{{"rmse_ens_mean", c.rmse_ens_mean},
                     {"crps", c.crps},
                     {"spread", c.spread},
                     {"rank_histogram", c.rank_histogram},
                     {"rank_p_value", c.rank_p_value},
                     {"samples", c.samples},
                     {"rank_samples", c.rank_samples}};
    e["rmse_det"] = c.rmse_det ? nlohmann::json(*c.rmse_det) : nlohmann::json(nullptr);
    e["ssr"] = c.ssr ? nlohmann::json(*c.ssr) : nlohmann::json(nullptr);
    j["metrics"][c.variable][std::to_string(c.lead)] = e;
  }
  return j;
}

VerificationReport VerificationReport::from_json(const nlohmann::json& j) {
  VerificationReport r;
  r.variables = j.at("variables").get<std::vector<std::string>>();
  r.leads = j.at("leads").get<std::vector<Index>>();
  r.members = j.at("members").get<Index>();
  for (const auto& var : r.variables)
    for (Index lead : r.leads) {
      const auto& e = j.at("metrics").at(var).at(std::to_string(lead));
      MetricCell c;
      c.variable = var;
      c.lead = lead;
      if (!e.at("rmse_det").is_null()) c.rmse_det = e.at("rmse_det").get<double>();
      if (!e.at("ssr").is_null()) c.ssr = e.at("ssr").get<double>();
      c.rmse_ens_mean = e.at("rmse_ens_mean").get<double>();
      c.crps = e.at("crps").get<double>();
      c.spread = e.at("spread").get<double>();
      c.rank_histogram = e.at("rank_histogram").get<std::vector<std::int64_t>>();
      c.rank_p_value = e.at("rank_p_value").get<double>();
      c.samples = e.at("samples").get<std::int64_t>();
      c.rank_samples = e.value("rank_samples", std::int64_t{0});
      r.cells.push_back(std::move(c));
    }
  return r;
}

std::string VerificationReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "variable,lead,metric,value\n";
  for (const MetricCell& c : cells) {
    auto row = [&](const char* name, double v) { os << c.variable << ',' << c.lead << ',' << name << ',' << v << '\n'; };
    if (c.rmse_det) row("rmse_det", *c.rmse_det);
    row("rmse_ens_mean", c.rmse_ens_mean);
    row("crps", c.crps);
    row("spread", c.spread);
    if (c.ssr) row("ssr", *c.ssr);
    row("rank_p_value", c.rank_p_value);
    for (std::size_t b = 0; b < c.rank_histogram.size(); ++b)
      os << c.variable << ',' << c.lead << ",rank_bin_" << b << ',' << c.rank_histogram[b] << '\n';
  }
  return os.str();
}

namespace {

double tie_uniform(const RngKey& key, std::uint64_t p) {
  const auto block = philox_block(key, static_cast<std::uint32_t>(p / 4));
  return static_cast<double>(block[p % 4]) * 0x1p-32;
}

// Rank in [0, M] of y among xs; ties resolved by u in [0, 1).
Index rank_of(const double* xs, Index m, double y, double u) {
  Index less = 0, ties = 0;
  for (Index j = 0; j < m; ++j) {
    less += xs[j] < y;
    ties += xs[j] == y;
  }
  if (ties == 0) return less;
  return less + std::min(ties, static_cast<Index>(u * static_cast<double>(ties + 1)));
}

}  // namespace

MetricsAccumulator::MetricsAccumulator(std::vector<std::string> variables, Index leads, Index members,
                                       SpatialWeights weights, MetricsOptions options)
    : variables_(std::move(variables)),
      leads_(leads),
      members_(members),
      weights_(std::move(weights)),
      options_(options) {
  if (members_ < 2) throw std::invalid_argument("ensemble metrics need at least 2 members");
  if (leads_ < 1) throw std::invalid_argument("ensemble metrics need at least one lead");
  if (options_.rank_stride < 1) throw std::invalid_argument("rank_stride must be >= 1");
  sums_.resize(variables_.size() * static_cast<std::size_t>(leads_));
  for (auto& s : sums_) s.ranks.assign(static_cast<std::size_t>(members_ + 1), 0);
}

void MetricsAccumulator::add(const std::vector<TensorF>& members, const TensorF& truth, const TensorF* deterministic) {
  const Shape ts = truth.shape();
  const auto nv = static_cast<Index>(variables_.size());
  if (static_cast<Index>(members.size()) != members_) {
    throw std::invalid_argument("MetricsAccumulator: expected " + std::to_string(members_) + " members");
  }
  if (ts.n != leads_ || ts.c != nv) {
    throw ShapeError("ensemble_metrics", "truth", ts,
                     "(" + std::to_string(leads_) + "," + std::to_string(nv) + ",H,W)");
  }
  if (weights_.rows() != ts.h) throw ShapeError("ensemble_metrics", "weights", Shape{1, 1, weights_.rows(), 1}, "length " + std::to_string(ts.h));
  for (const TensorF& m : members)
    if (!(m.shape() == ts)) throw ShapeError("ensemble_metrics", "forecast", m.shape(), ts.str());
  if (deterministic && !(deterministic->shape() == ts)) {
    throw ShapeError("ensemble_metrics", "deterministic", deterministic->shape(), ts.str());
  }
  if (cases_ == 0) has_det_ = deterministic != nullptr;
  if (has_det_ != (deterministic != nullptr)) throw std::invalid_argument("MetricsAccumulator: deterministic given inconsistently");

  const Index plane = ts.h * ts.w;
  const double md = static_cast<double>(members_);
  std::vector<double> xs(static_cast<std::size_t>(members_));
  for (Index t = 0; t < leads_; ++t)
    for (Index v = 0; v < nv; ++v) {
      Sums& s = sums_[static_cast<std::size_t>(v * leads_ + t)];
      RngKey key = options_.tie_key;
      key.member_id = static_cast<std::uint32_t>(cases_);
      key.layer_id = static_cast<std::uint32_t>(v);
      key.step_index = static_cast<std::uint32_t>(t + 1);
      std::uint64_t rank_index = 0;
      const Index base = (t * nv + v) * plane;
      for (Index p = 0; p < plane; ++p) {
        const Index row = p / ts.w, col = p % ts.w;
        const double w = weights_.w[row];
        const double y = truth[base + p];
        double mean = 0.0;
        for (Index j = 0; j < members_; ++j) mean += xs[static_cast<std::size_t>(j)] = members[static_cast<std::size_t>(j)][base + p];
        mean /= md;
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        var /= md - 1.0;
        s.wsum += w;
        s.se_mean += w * (mean - y) * (mean - y);
        s.var += w * var;
        s.crps += w * afcrps(xs, y, options_.alpha_loss);
        if (deterministic) {
          const double d = (*deterministic)[base + p] - y;
          s.se_det += w * d * d;
        }
        ++s.points;
        if (row % options_.rank_stride == 0 && col % options_.rank_stride == 0) {
          const Index r = rank_of(xs.data(), members_, y, tie_uniform(key, rank_index++));
          ++s.ranks[static_cast<std::size_t>(r)];
          ++s.rank_points;
        }
      }
    }
  ++cases_;
}

VerificationReport MetricsAccumulator::finalize() const {
  VerificationReport r;
  r.variables = variables_;
  r.members = members_;
  for (Index t = 0; t < leads_; ++t) r.leads.push_back(t + 1);
  const double corr = options_.ssr_correction ? std::sqrt((static_cast<double>(members_) + 1.0) / members_) : 1.0;
  for (std::size_t v = 0; v < variables_.size(); ++v)
    for (Index t = 0; t < leads_; ++t) {
      const Sums& s = sums_[v * static_cast<std::size_t>(leads_) + static_cast<std::size_t>(t)];
      MetricCell c;
      c.variable = variables_[v];
      c.lead = t + 1;
      const double wsum = s.wsum > 0 ? s.wsum : 1.0;
      c.rmse_ens_mean = std::sqrt(s.se_mean / wsum);
      c.spread = std::sqrt(s.var / wsum);
      c.crps = s.crps / wsum;
      if (has_det_) c.rmse_det = std::sqrt(s.se_det / wsum);
      if (c.rmse_ens_mean > 0.0) c.ssr = corr * c.spread / c.rmse_ens_mean;
      c.rank_histogram = s.ranks;
      c.rank_p_value = s.rank_points > 0 ? chi_square_uniform_p(s.ranks) : 1.0;
      c.samples = s.points;
      c.rank_samples = s.rank_points;
      r.cells.push_back(std::move(c));
    }
  return r;
}

VerificationReport ensemble_metrics(const std::vector<TensorF>& forecasts, const TensorF& truth,
                                    const SpatialWeights& weights, double alpha_loss,
                                    const std::vector<std::string>& variables) {
  MetricsOptions opt;
  opt.alpha_loss = alpha_loss;
  MetricsAccumulator acc(variables, truth.shape().n, static_cast<Index>(forecasts.size()), weights, opt);
  acc.add(forecasts, truth);
  return acc.finalize();
}

std::vector<std::int64_t> rank_histogram(const std::vector<std::vector<float>>& members, const std::vector<float>& truth,
                                         const RngKey& tie_key) {
  const auto m = static_cast<Index>(members.size());
  if (m < 1) throw std::invalid_argument("rank_histogram: need at least one member");
  for (const auto& x : members)
    if (x.size() != truth.size()) throw std::invalid_argument("rank_histogram: member/truth size mismatch");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(m + 1), 0);
  std::vector<double> xs(static_cast<std::size_t>(m));
  for (std::size_t p = 0; p < truth.size(); ++p) {
    for (Index j = 0; j < m; ++j) xs[static_cast<std::size_t>(j)] = members[static_cast<std::size_t>(j)][p];
    ++counts[static_cast<std::size_t>(rank_of(xs.data(), m, truth[p], tie_uniform(tie_key, p)))];
  }
  return counts;
}

double chi_square_uniform_p(const std::vector<std::int64_t>& counts) {
  if (counts.size() < 2) throw std::invalid_argument("chi_square_uniform_p: need at least two bins");
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total <= 0) throw std::invalid_argument("chi_square_uniform_p: empty histogram");
  const double expected = total / static_cast<double>(counts.size());
  double chi2 = 0.0;
  for (auto c : counts) chi2 += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  Eigen::Array<double, 1, 1> a, x;
  a << 0.5 * static_cast<double>(counts.size() - 1);
  x << 0.5 * chi2;
  return Eigen::igammac(a, x)(0);
}

}  // namespace sdl
