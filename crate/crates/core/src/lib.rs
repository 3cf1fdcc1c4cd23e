pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod likelihood;
pub mod output;
pub mod sampler;
pub mod selection;
pub mod simulate;
pub mod summary;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data.md")]
mod book_data {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/priors.md")]
mod book_priors {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/likelihood.md")]
mod book_likelihood {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/sampling.md")]
mod book_sampling {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/selection.md")]
mod book_selection {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/summaries.md")]
mod book_summaries {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
