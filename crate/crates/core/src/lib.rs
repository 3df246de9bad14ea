//! Desk-scale explainable diabetic-retinopathy vision-language model.
//!
//! Data flows as: [`synthfundus`] images → [`encoder`] patch features →
//! [`connector`] projection into the decoder's embedding space → [`lvlm`]
//! decoder conditioned on a task prompt → text parsed by [`report`] and
//! scored by [`evaluation`]. [`experiments`] wires the stages together.

pub mod labels;
pub mod report;
pub mod synthfundus;
pub mod connector;
pub mod encoder;
pub mod evaluation;
pub mod experiments;
pub mod lvlm;
pub mod nn;
