#pragma once

#include "medt/dataset.hpp"
#include "medt/models.hpp"
#include "medt/training.hpp"

namespace medt::testing {

/// 60 simulated episodes shared by the model-level tests.
inline const data::Dataset& small_dataset()
{
    static const data::Dataset d = data::generate_dataset(60, sim::SimConfig{}, 5);
    return d;
}

inline nn::TransformerConfig tiny_transformer()
{
    nn::TransformerConfig t;
    t.layers = 2;
    t.heads = 2;
    t.model_dim = 16;
    t.ff_dim = 32;
    t.dropout = 0.0;
    return t;
}

inline model::ModelConfig tiny_config(model::Variant v, int atg_tokens = 1)
{
    auto c = model::default_config(v, small_dataset(), tiny_transformer());
    c.atg_tokens = atg_tokens;
    c.transformer.context_tokens = c.layout().encoded_length(c.context_steps);
    return c;
}

inline train::TrainConfig tiny_train(model::Variant v, int epochs = 2)
{
    train::TrainConfig c;
    c.variant = v;
    c.epochs = epochs;
    c.batch_size = 16;
    c.learning_rate = 1e-3;
    c.seed = 3;
    c.pad_to_context = false;
    c.transformer = tiny_transformer();
    return c;
}

/// Prefix over the first `steps` steps of episode 0 with the final action hidden.
inline model::Prefix prefix_of(const data::Trajectory& tr, int steps)
{
    auto p = model::Prefix::from_trajectory(tr, steps);
    p.actions.pop_back();
    return p;
}

} // namespace medt::testing
