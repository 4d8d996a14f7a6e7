#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ragopt/corpus.hpp"
#include "ragopt/embedding.hpp"
#include "ragopt/rng.hpp"

namespace testutil {

inline std::filesystem::path data_dir() { return RAGOPT_DATA_DIR; }

inline ragopt::FaqCorpus tiny_corpus() {
    return ragopt::FaqCorpus("tiny", {
                                         {"fee", "Is there an annual fee?", "Yes, the annual fee is INR 500."},
                                         {"cashback", "What cashback do I get?", "4% cashback on Swiggy and PVR."},
                                         {"otp", "Why am I not getting the OTP?", "Wait two minutes and tap resend."},
                                     });
}

inline ragopt::Vector random_vector(ragopt::Rng& rng, std::size_t n) {
    ragopt::Vector v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

inline ragopt::Matrix random_matrix(ragopt::Rng& rng, std::size_t n, double jitter = 0.5) {
    auto m = ragopt::Matrix::identity(n);
    for (auto& x : m.data()) x += rng.uniform(-jitter, jitter);
    return m;
}

// max |a-b| / max(1, |a|, |b|) style mixed error, so tiny gradients don't blow up the ratio
inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({1e-6, std::abs(analytic), std::abs(numeric)});
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("ragopt_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil
