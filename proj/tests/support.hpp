#pragma once

#include <string>
#include <vector>

#include "relikit/data.hpp"
#include "relikit/rng.hpp"

namespace testing_support {

// Complete I x J x K table with Bernoulli(p) outcomes and optional covariates
// drawn uniformly from [-1, 1].
inline relikit::RatingsTable random_table(int I, int J, int K, relikit::Rng& rng,
                                          double p = 0.5, int n_cov = 0) {
  std::vector<std::string> names;
  for (int c = 0; c < n_cov; ++c) names.push_back("x" + std::to_string(c + 1));
  relikit::RatingsTable::Builder b(names);
  std::vector<double> cov(n_cov);
  for (int i = 0; i < I; ++i)
    for (int j = 0; j < J; ++j)
      for (int k = 0; k < K; ++k) {
        for (auto& x : cov) x = 2 * relikit::uniform01(rng) - 1;
        b.add("s" + std::to_string(i + 1), "r" + std::to_string(j + 1), "t" + std::to_string(k + 1),
              relikit::uniform01(rng) < p, cov);
      }
  return std::move(b).build();
}

}  // namespace testing_support
