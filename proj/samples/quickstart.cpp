// Generates a small synthetic catalogue, trains a late-fusion hierarchical
// classifier on it and prints test scores plus a few predicted paths.

#include <cstdio>

#include "taxengine/taxengine.hpp"

int main()
{
    using namespace taxengine;

    std::vector<CategoryPath> paths;
    for (const char* raw : {"Apparel > Shoes > Boots", "Apparel > Shoes > Sneakers", "Apparel > Bags > Totes",
                            "Apparel > Bags > Clutches", "Apparel > Hats"}) {
        paths.push_back(parse_path(raw));
    }
    const auto tax = Taxonomy::build(paths);
    const auto bundle = gen_synthetic(tax, 60, {{"title", 16, 0.15}, {"image", 16, 0.3}}, 0.2, 1);

    const auto split = stratified_split(bundle, {}, 2);
    auto model = build_model(tax, make_fusion_config(FusionStrategy::Late, bundle_modalities(bundle)), 3);
    TrainConfig tc;
    tc.seed = 4;
    const auto history = train(model, bundle, split, tc);

    const auto test = split.indices(Split::Test);
    const auto eval = evaluate_model(model, bundle, test);
    std::printf("epochs %zu (best %zu)\n", history.epochs.size(), history.best_epoch);
    std::printf("test hP %.4f hR %.4f hF1 %.4f exact %.4f\n", eval.report.hier.hP, eval.report.hier.hR, eval.report.hier.hF,
                eval.report.exact_path_accuracy);
    for (std::size_t k = 0; k < 5 && k < test.size(); ++k) {
        const auto& p = eval.predictions[k];
        std::printf("%s  truth: %s  predicted: %s  (%.3f)\n", bundle.ids[test[k]].c_str(), bundle.labels[test[k]].join().c_str(),
                    p.path.join().c_str(), p.path_confidence);
    }
}
