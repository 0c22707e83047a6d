#pragma once

#include "skipvae/tensor.hpp"
#include "skipvae/rng.hpp"
#include "skipvae/distributions.hpp"
#include "skipvae/models.hpp"
#include "skipvae/dataset.hpp"
#include "skipvae/training.hpp"
#include "skipvae/metrics.hpp"
#include "skipvae/gaussian_oracle.hpp"
#include "skipvae/config.hpp"
#include "skipvae/persistence.hpp"
#include "skipvae/commands.hpp"
