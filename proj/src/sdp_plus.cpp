#include "clipad/sdp/sdp_plus.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "clipad/errors.hpp"
#include "clipad/numerics/random.hpp"
#include "clipad/sdp/sdp.hpp"

namespace clipad::sdp {

namespace {

std::string weight_name(std::size_t j) { return "proj." + std::to_string(j) + ".weight"; }
std::string bias_name(std::size_t j) { return "proj." + std::to_string(j) + ".bias"; }

TensorD text_matrix(const rvs::RepresentativePair& pair) { return pair.stacked().cast<double>(); }

std::size_t grid_side(std::size_t patches) {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
  if (g * g != patches) throw DimensionError("patch count " + std::to_string(patches) + " is not a square");
  return g;
}

// Mean of the stage probabilities on the patch grid.
TensorD averaged_grid(const std::vector<StageActivation>& acts) {
  const std::size_t L = acts.front().probability.size();
  const std::size_t g = grid_side(L);
  TensorD grid({g, g});
  for (const auto& a : acts)
    for (std::size_t l = 0; l < L; ++l) grid[l] += a.probability[l];
  for (double& v : grid.data()) v /= static_cast<double>(acts.size());
  return grid;
}

std::vector<StageActivation> forward_stages(const TrainSample& sample, const Projections& projections,
                                            const TensorD& text, double temperature) {
  if (sample.stage_tokens.size() != projections.size()) {
    throw DimensionError("sample has " + std::to_string(sample.stage_tokens.size()) + " stages, projections " +
                         std::to_string(projections.size()));
  }
  std::vector<StageActivation> acts;
  acts.reserve(projections.size());
  for (std::size_t j = 0; j < projections.size(); ++j) {
    acts.push_back(map_stage(sample.stage_tokens[j], projections[j], text, temperature));
  }
  return acts;
}

}  // namespace

Projections init_projections(const backbone::ModelConfig& config, std::uint64_t seed) {
  numerics::Rng rng(seed);
  const double bound = 1.0 / static_cast<double>(config.width);
  Projections out;
  for (std::size_t j = 0; j < config.stages; ++j) {
    StageProjection p{TensorD({config.width, config.embed_dim}), TensorD({config.embed_dim})};
    for (double& v : p.weight.data()) v = rng.uniform(-bound, bound);
    out.push_back(std::move(p));
  }
  return out;
}

backbone::TensorContainer to_container(const Projections& projections) {
  backbone::TensorContainer c;
  for (std::size_t j = 0; j < projections.size(); ++j) {
    c.put(weight_name(j), projections[j].weight);
    c.put(bias_name(j), projections[j].bias);
  }
  return c;
}

Projections projections_from_container(const backbone::TensorContainer& container) {
  Projections out;
  for (std::size_t j = 0; container.contains(weight_name(j)); ++j) {
    TensorD weight = container.as_f64(weight_name(j));
    TensorD bias = container.as_f64(bias_name(j));
    if (weight.rank() != 2 || bias.rank() != 1 || bias.size() != weight.cols()) {
      throw ShapeMismatchError("projection " + std::to_string(j) + ": weight " + numerics::shape_string(weight.shape()) +
                               " does not match bias " + numerics::shape_string(bias.shape()));
    }
    if (!out.empty() && weight.shape() != out.front().weight.shape()) {
      throw ShapeMismatchError("projection " + std::to_string(j) + " differs in shape from projection 0");
    }
    out.push_back({std::move(weight), std::move(bias)});
  }
  if (out.empty()) throw MissingTensorError(weight_name(0));
  return out;
}

void save_projections(const Projections& projections, const std::filesystem::path& path) {
  backbone::save_container(to_container(projections), path);
}

Projections load_projections(const std::filesystem::path& path) {
  return projections_from_container(backbone::load_container(path));
}

StageActivation map_stage(const Tensor& patch_tokens, const StageProjection& projection, const TensorD& text,
                          double temperature) {
  if (temperature <= 0.0) throw ValidationError("temperature must be positive");
  const std::size_t L = patch_tokens.rows(), W = patch_tokens.cols(), C = projection.weight.cols();
  if (projection.weight.rows() != W || text.rank() != 2 || text.rows() != 2 || text.cols() != C) {
    throw DimensionError("map_stage: tokens " + numerics::shape_string(patch_tokens.shape()) + ", weight " +
                         numerics::shape_string(projection.weight.shape()) + ", text " +
                         numerics::shape_string(text.shape()));
  }
  StageActivation act;
  act.probability.resize(L);
  act.norm.resize(L);
  act.unit.assign(L * C, 0.0);
  std::vector<double> u(C);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t c = 0; c < C; ++c) u[c] = projection.bias[c];
    for (std::size_t w = 0; w < W; ++w) {
      const double f = patch_tokens(l, w);
      const auto k = projection.weight.row(w);
      for (std::size_t c = 0; c < C; ++c) u[c] += f * k[c];
    }
    double sq = 0.0;
    for (double v : u) sq += v * v;
    const double norm = std::sqrt(sq);
    act.norm[l] = norm;
    if (norm == 0.0) {
      ++act.zero_rows;
      act.probability[l] = 0.5;
      continue;
    }
    double sim_n = 0.0, sim_a = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double unit = u[c] / norm;
      act.unit[l * C + c] = unit;
      sim_n += unit * text(0, c);
      sim_a += unit * text(1, c);
    }
    // softmax([sim_n, sim_a] / t)[1] written as a logistic of the difference.
    const double z = (sim_a - sim_n) / temperature;
    act.probability[l] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return act;
}

TensorD mapped_anomaly_map(std::span<const Tensor> stage_patch_tokens, const Projections& projections,
                           const rvs::RepresentativePair& pair, double temperature) {
  if (stage_patch_tokens.size() != projections.size() || projections.empty()) {
    throw DimensionError("mapped_anomaly_map: " + std::to_string(stage_patch_tokens.size()) + " stages but " +
                         std::to_string(projections.size()) + " projections");
  }
  const TensorD text = text_matrix(pair);
  const std::size_t L = stage_patch_tokens.front().rows();
  const std::size_t g = grid_side(L);
  TensorD grid({g, g});
  for (std::size_t j = 0; j < projections.size(); ++j) {
    const StageActivation act = map_stage(stage_patch_tokens[j], projections[j], text, temperature);
    for (std::size_t l = 0; l < L; ++l) grid[l] += act.probability[l];
  }
  return grid;
}

Tensor combine(const Tensor& m, const Tensor& m_ft) {
  if (m.shape() != m_ft.shape()) {
    throw DimensionError("combine: " + numerics::shape_string(m.shape()) + " vs " + numerics::shape_string(m_ft.shape()));
  }
  Tensor out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] + m_ft[i];
  return out;
}

void LossConfig::validate() const {
  if (!(gamma >= 0.0)) throw ValidationError("loss gamma must be >= 0");
  if (!(epsilon > 0.0)) throw ValidationError("loss epsilon must be > 0");
  if (!(clamp > 0.0 && clamp < 0.5)) throw ValidationError("loss clamp must lie in (0, 0.5)");
}

LossValue loss(const TensorD& prediction, const TensorD& mask, const LossConfig& config) {
  config.validate();
  if (prediction.shape() != mask.shape()) {
    throw DimensionError("loss: prediction " + numerics::shape_string(prediction.shape()) + " vs mask " +
                         numerics::shape_string(mask.shape()));
  }
  const std::size_t n = prediction.size();
  if (n == 0) throw ValidationError("loss: empty prediction");
  const double a = config.alpha, gm = config.gamma, eps = config.epsilon;
  const double lo = config.clamp, hi = 1.0 - config.clamp;

  LossValue out;
  out.grad = TensorD(prediction.shape());
  double focal = 0.0, inter = 0.0, sum_m = 0.0, sum_g = 0.0;
  std::vector<double> clamped(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = mask[i];
    if (g != 0.0 && g != 1.0) throw ValidationError("loss: ground-truth mask must be binary");
    const double m = std::clamp(prediction[i], lo, hi);
    clamped[i] = m;
    focal += -a * std::pow(1.0 - m, gm) * std::log(m) * g - (1.0 - a) * std::pow(m, gm) * std::log(1.0 - m) * (1.0 - g);
    inter += m * g;
    sum_m += m;
    sum_g += g;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const double denom = sum_m + sum_g + eps;
  out.focal = focal * inv_n;
  out.dice = 1.0 - (2.0 * inter + eps) / denom;
  out.total = out.focal + out.dice;

  for (std::size_t i = 0; i < n; ++i) {
    if (prediction[i] < lo || prediction[i] > hi) continue;
    const double g = mask[i], m = clamped[i];
    const double pos_pow1 = gm == 0.0 ? 0.0 : gm * std::pow(1.0 - m, gm - 1.0);
    const double neg_pow1 = gm == 0.0 ? 0.0 : gm * std::pow(m, gm - 1.0);
    const double d_pos = -a * g * (-pos_pow1 * std::log(m) + std::pow(1.0 - m, gm) / m);
    const double d_neg = -(1.0 - a) * (1.0 - g) * (neg_pow1 * std::log(1.0 - m) - std::pow(m, gm) / (1.0 - m));
    const double d_dice = -(2.0 * g * denom - (2.0 * inter + eps)) / (denom * denom);
    out.grad[i] = (d_pos + d_neg) * inv_n + d_dice;
  }
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ValidationError("learning rate must be >= 0");
  if (epochs == 0) throw ValidationError("epochs must be positive");
  if (batch_size == 0) throw ValidationError("batch size must be positive");
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("Adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ValidationError("Adam epsilon must be positive");
}

double sample_loss(const TrainSample& sample, const Projections& projections, const rvs::RepresentativePair& pair,
                   double temperature, const LossConfig& loss_config) {
  const auto acts = forward_stages(sample, projections, text_matrix(pair), temperature);
  const TensorD pixel = upsample(averaged_grid(acts), sample.mask.rows(), sample.mask.cols());
  return loss(pixel, sample.mask, loss_config).total;
}

SampleGradient sample_gradient(const TrainSample& sample, const Projections& projections,
                               const rvs::RepresentativePair& pair, double temperature, const LossConfig& loss_config) {
  const TensorD text = text_matrix(pair);
  const auto acts = forward_stages(sample, projections, text, temperature);
  const TensorD grid = averaged_grid(acts);
  const TensorD pixel = upsample(grid, sample.mask.rows(), sample.mask.cols());
  const LossValue lv = loss(pixel, sample.mask, loss_config);
  const TensorD grad_grid = upsample_backward(lv.grad, grid.rows(), grid.cols());

  const std::size_t S = projections.size();
  const std::size_t C = text.cols();
  std::vector<double> delta(C);
  for (std::size_t c = 0; c < C; ++c) delta[c] = text(1, c) - text(0, c);

  SampleGradient out;
  out.loss = lv.total;
  std::vector<double> du(C);
  for (std::size_t j = 0; j < S; ++j) {
    const StageActivation& act = acts[j];
    const Tensor& tokens = sample.stage_tokens[j];
    const std::size_t W = tokens.cols();
    StageProjection g{TensorD(projections[j].weight.shape()), TensorD(projections[j].bias.shape())};
    for (std::size_t l = 0; l < act.probability.size(); ++l) {
      if (act.norm[l] == 0.0) continue;
      const double p = act.probability[l];
      const double dz = grad_grid[l] / static_cast<double>(S) * p * (1.0 - p) / temperature;
      if (dz == 0.0) continue;
      const double* unit = act.unit.data() + l * C;
      double proj = 0.0;
      for (std::size_t c = 0; c < C; ++c) proj += unit[c] * delta[c];
      const double scale = dz / act.norm[l];
      for (std::size_t c = 0; c < C; ++c) du[c] = scale * (delta[c] - proj * unit[c]);
      for (std::size_t c = 0; c < C; ++c) g.bias[c] += du[c];
      for (std::size_t w = 0; w < W; ++w) {
        const double f = tokens(l, w);
        auto row = g.weight.row(w);
        for (std::size_t c = 0; c < C; ++c) row[c] += f * du[c];
      }
    }
    out.grad.push_back(std::move(g));
  }
  return out;
}

TrainResult train(std::span<const TrainSample> samples, Projections initial, const rvs::RepresentativePair& pair,
                  const TrainConfig& train_config, const LossConfig& loss_config) {
  train_config.validate();
  loss_config.validate();
  if (samples.empty()) throw ValidationError("train: empty dataset");
  for (const auto& s : samples) {
    if (s.mask.rank() != 2) throw DimensionError("train: masks must be 2-D");
  }

  TrainResult result;
  result.projections = std::move(initial);
  Projections& params = result.projections;

  std::vector<double*> views;
  for (auto& p : params) {
    for (double& v : p.weight.data()) views.push_back(&v);
    for (double& v : p.bias.data()) views.push_back(&v);
  }
  std::vector<double> m1(views.size(), 0.0), m2(views.size(), 0.0), grad(views.size());

  numerics::Rng rng(train_config.seed);
  std::vector<std::size_t> order(samples.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < train_config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double epoch_total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += train_config.batch_size) {
      const std::size_t end = std::min(begin + train_config.batch_size, order.size());
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t b = begin; b < end; ++b) {
        const SampleGradient sg = sample_gradient(samples[order[b]], params, pair, train_config.temperature, loss_config);
        epoch_total += sg.loss;
        std::size_t k = 0;
        for (const auto& p : sg.grad) {
          for (double v : p.weight.values()) grad[k++] += v;
          for (double v : p.bias.values()) grad[k++] += v;
        }
      }
      const double inv_batch = 1.0 / static_cast<double>(end - begin);
      ++step;
      const double c1 = 1.0 - std::pow(train_config.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(train_config.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < views.size(); ++k) {
        const double g = grad[k] * inv_batch;
        m1[k] = train_config.beta1 * m1[k] + (1.0 - train_config.beta1) * g;
        m2[k] = train_config.beta2 * m2[k] + (1.0 - train_config.beta2) * g * g;
        const double m_hat = m1[k] / c1;
        const double v_hat = m2[k] / c2;
        *views[k] -= train_config.learning_rate * m_hat / (std::sqrt(v_hat) + train_config.adam_epsilon);
      }
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(samples.size()));
    result.snapshots.push_back(params);
  }
  return result;
}

}  // namespace clipad::sdp
