// Minimal end-to-end tour: sample a 2-D test function with derivative
// observations, train a plain SVGP and a directional-derivative model at the
// same inducing-matrix size, compare test metrics, and run a short LCB
// optimization with the directional surrogate.
#include <iostream>

#include "gpdd/bo.hpp"
#include "gpdd/data.hpp"
#include "gpdd/variational.hpp"

using namespace gpdd;

int main() {
  const TestFunction& fn = test_function("camel");
  DerivativeDataset train = sample_dataset(fn, 400, 0.05, 0.05, 1);
  DerivativeDataset test = restandardize(sample_dataset(fn, 400, 0.0, 0.0, 2), train.std_);

  // Matched inducing-matrix size 60: SVGP gets M=60, p=1 model gets M=30.
  vi::TrainingConfig svgp;
  svgp.M = 60;
  svgp.p = 0;
  svgp.dirs = vi::DirectionMode::None;
  svgp.epochs = 60;
  svgp.batch = 256;
  svgp.seed = 3;
  vi::TrainResult plain = vi::train(strip_gradients(train), svgp);
  vi::Metrics m0 = vi::nll_rmse(plain.params, plain.state, test);

  vi::TrainingConfig dsvgp = svgp;
  dsvgp.M = 30;
  dsvgp.p = 1;
  dsvgp.dirs = vi::DirectionMode::Learned;
  vi::TrainResult direc = vi::train(train, dsvgp);
  vi::Metrics m1 = vi::nll_rmse(direc.params, direc.state, test);

  std::cout << "camel, matched inducing-matrix size 60\n"
            << "  svgp   (M=60, p=0): nll " << m0.nll << ", rmse " << m0.rmse << "\n"
            << "  dsvgp1 (M=30, p=1): nll " << m1.nll << ", rmse " << m1.rmse << "\n";

  bo::BoConfig cfg;
  cfg.box = bo::Box::of(fn);
  cfg.budget = 30;
  cfg.init = 10;
  cfg.kind = bo::SurrogateKind::Dppgpr;
  cfg.p = 1;
  cfg.M = 10;
  cfg.epochs = 15;
  cfg.starts = 16;
  cfg.descent_steps = 40;
  cfg.seed = 7;
  bo::History h = bo::run_bo(cfg, fn);
  std::cout << "bo on camel (dppgpr1, budget 30): best " << h.best.back()
            << " after " << h.n() << " evaluations\n";
  return 0;
}
