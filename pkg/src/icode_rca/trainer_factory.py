from icode_rca.trainer import Trainer


class TrainerFactory:

    def get_trainer(self, cfg, initial=None):
        """
        Create a Trainer for a training configuration.
        :param cfg: The TrainConfig to optimise with.
        :param initial: Optional model to warm-start from.
        :return: A Trainer instance.
        """
        return Trainer(cfg, initial)
