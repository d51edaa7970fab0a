#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cloak/data.hpp"
#include "cloak/nets.hpp"
#include "cloak/spec.hpp"

namespace cloak {

/// Analytical cost of a network next to a reference classifier. FLOPS are
/// convolution/linear multiply-accumulates scaled by a configurable
/// MAC-to-FLOP factor (default 1, i.e. the counts are MACs); normalization
/// and activation work is not counted. Ratios are percentages.
struct CostReport {
  std::int64_t flops = 0;
  std::int64_t params = 0;
  double flops_ratio = 0.0;
  double params_ratio = 0.0;
};

/// Closed-form parameter count straight from the declarative spec: weights
/// plus optional biases plus normalization scale/shift; running statistics
/// are buffers and excluded. Independent of the network builder.
std::int64_t count_params(const NetworkSpec& spec);
std::int64_t count_params(const NetworkHandle& net);

/// Closed-form MAC count from the spec under shape propagation.
std::int64_t count_flops(const NetworkSpec& spec, int mac_to_flop_factor = 1);
std::int64_t count_flops(const NetworkHandle& net, Shape3 input, int mac_to_flop_factor = 1);

CostReport cost_report(const NetworkHandle& obf, const NetworkHandle& clf, Shape3 input,
                       int mac_to_flop_factor = 1);

/// Top-1 accuracy of the frozen classifier; when an obfuscator is supplied
/// every input is obfuscated first (the deployment path).
double evaluate_accuracy(const NetworkHandle& clf, const DatasetSplit& data,
                         const NetworkHandle* obf = nullptr, int batch_size = 256);

/// Accuracy grid of obfuscators applied to classifiers other than the one
/// they were trained against. Rows: trained_on; columns: tested_on.
struct TransferMatrix {
  std::vector<std::string> trained_on;
  std::vector<std::string> tested_on;
  std::vector<std::vector<double>> accuracy;

  double at(const std::string& row, const std::string& col) const;
  std::string to_json() const;
};

TransferMatrix transfer_matrix(const std::map<std::string, const NetworkHandle*>& obfuscators,
                               const std::map<std::string, const NetworkHandle*>& classifiers,
                               const DatasetSplit& data);

/// Side-by-side original / obfuscated / reconstructed grid written as a
/// lossless PNG; one row per sample. Throws on an empty batch.
void export_grid(const Tensor& originals, const Tensor& obfuscated,
                 const Tensor& reconstructed, const std::string& path);

/// Published full-scale reference results for the four standard classifier
/// configurations; not reproducible at desk scale, recorded for
/// documentation and reporting.
struct ReferenceResult {
  const char* arch;
  double plain_accuracy;
  double obfuscated_accuracy;
  double flops_overhead;   // obfuscator cost relative to the classifier
  double params_overhead;
};

inline constexpr ReferenceResult kReferenceResults[] = {
    {"vgg19", 0.934, 0.893, 0.067, 0.016},
    {"resnet18", 0.948, 0.898, 0.048, 0.029},
    {"resnet50", 0.951, 0.902, 0.021, 0.014},
    {"googlenet", 0.952, 0.905, 0.017, 0.053},
};

/// Published full-scale transfer grid (row: trained with, column: tested
/// on). resnet18_1 / resnet18_2 differ only in random initialisation.
inline constexpr const char* kReferenceTransferIds[] = {"resnet18_1", "resnet18_2",
                                                        "resnet50", "googlenet", "vgg19"};
inline constexpr double kReferenceTransfer[5][5] = {
    {0.898, 0.538, 0.360, 0.306, 0.474},
    {0.726, 0.900, 0.467, 0.347, 0.460},
    {0.621, 0.549, 0.902, 0.291, 0.448},
    {0.710, 0.740, 0.663, 0.905, 0.415},
    {0.258, 0.200, 0.202, 0.130, 0.893},
};

}  // namespace cloak
