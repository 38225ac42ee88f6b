pub mod backbone;
pub mod dynamics;
pub mod evaluation;
pub mod model;
pub mod modulation;
pub mod objectives;
pub mod registry;
pub mod tensor;
pub mod testing;
pub mod training;
pub mod util;
